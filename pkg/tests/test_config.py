from pathlib import Path

import pytest

from config import ExperimentConfig, load_config_file, parse_config_text
from recipe_runner import RECIPES, parameter_grid
from services.errors import ConfigError
from services.params_kernels import check_hypotheses


def test_repeated_keys_accumulate():
    raw = parse_config_text("sigma = 1.0\nsigma = 1.5  # second\n\n# comment\nrecipe = abp-suite\n")
    assert raw == {"sigma": ["1.0", "1.5"], "recipe": ["abp-suite"]}


@pytest.mark.parametrize("text,line", [("sigma = 1\nnot a pair\n", 2), ("dim =\n", 1)])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}"):
        parse_config_text(text)


def test_from_mapping():
    cfg = ExperimentConfig.from_mapping(parse_config_text(
        "sigma = 1.5\nsigma = 1.9\ndim = 2\nspacing = 0.0625\nout = /tmp/x\n"
        "rings_per_decade = 8\ntaylor_inner = no\nfield = gauss(4)\nfield = dip(0.5,0.25,0)\n"
    ))
    assert cfg.sigma == [1.5, 1.9]
    assert cfg.dim == 2 and cfg.spacing == 0.0625
    assert cfg.out == Path("/tmp/x")
    assert cfg.quadrature == {"rings_per_decade": 8, "taylor_inner": False}
    assert cfg.extra_list("field") == ["gauss(4)", "dip(0.5,0.25,0)"]
    assert cfg.extra("field") == "dip(0.5,0.25,0)"
    assert cfg.extra_float("oracle_rel", 1e-4) == 1e-4


@pytest.mark.parametrize("text", ["dim = 3\n", "sigma = abc\n", "seed = 1.5\n", "taylor_inner = maybe\n",
                                  "spacing = -1\n"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(parse_config_text(text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "absent.cfg")


EXPERIMENTS = sorted((Path(__file__).resolve().parent.parent / "experiments").glob("*.cfg"))


@pytest.mark.parametrize("path", EXPERIMENTS, ids=lambda p: p.name)
def test_experiment_files_load_and_pass_the_hypotheses(path):
    cfg = ExperimentConfig.from_mapping(load_config_file(path))
    assert cfg.recipe in RECIPES
    grid = parameter_grid(cfg)
    assert grid
    assert all(check_hypotheses(pt.params).ok for pt in grid)


def test_interpolation_key():
    cfg = ExperimentConfig.from_mapping(parse_config_text("interpolation = linear\n"))
    assert cfg.quadrature == {"interpolation": "linear"}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(parse_config_text("interpolation = spline\n"))
