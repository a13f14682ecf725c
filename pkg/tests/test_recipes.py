import json

import pytest

from config import ExperimentConfig, parse_config_text
from recipe_runner import default_b, default_tau, parameter_grid, run_recipe
from services.errors import ConfigError
from services.reporting_service import read_table


def _cfg(tmp_path, text: str) -> ExperimentConfig:
    cfg = ExperimentConfig.from_mapping(parse_config_text(text))
    cfg.out = tmp_path
    return cfg


EVAL = """
recipe = eval-suite
sigma = 1.5
spacing = 0.03125
field = gauss(4)
field = cosine-bump(1)
points = 3
kernels = 2
"""


def test_default_grid():
    cfg = ExperimentConfig()
    grid = parameter_grid(cfg)
    assert [pt.params.sigma for pt in grid] == [1.0, 1.5, 1.9, 1.99]
    first = grid[0].params
    assert default_tau(1.0, 0.5) == pytest.approx(0.5)
    assert default_b(1.0, 1.0, 0.5) == pytest.approx(1.0)
    assert (first.tau, first.b) == pytest.approx((0.5, 1.0))
    assert grid[3].params.tau == pytest.approx(0.9)


def test_unknown_recipe(tmp_path):
    with pytest.raises(ConfigError):
        run_recipe(_cfg(tmp_path, "recipe = nope\n"))


def test_points_failing_hypotheses_are_skipped(tmp_path):
    cfg = _cfg(tmp_path, "recipe = barrier-suite\nsigma = 1.5\ntau = 0.5\nb = 5\n")
    result = run_recipe(cfg, write_pdf=False)
    assert result.exit_status == 0
    assert [r["status"] for r in result.rows] == ["skipped"]
    assert "H3" in result.rows[0]["reason"]
    assert result.point_paths == []
    summary = json.loads(result.summary_path.read_text())
    assert summary["counts"]["skipped"] == 1


def test_eval_suite_is_deterministic(tmp_path):
    first = run_recipe(_cfg(tmp_path / "a", EVAL), write_pdf=False)
    second = run_recipe(_cfg(tmp_path / "b", EVAL), write_pdf=False)
    assert first.table_path.read_bytes() == second.table_path.read_bytes()
    assert first.summary_path.read_bytes() == second.summary_path.read_bytes()
    assert [p.read_bytes() for p in first.point_paths] == [p.read_bytes() for p in second.point_paths]


def test_eval_suite_checks(tmp_path):
    result = run_recipe(_cfg(tmp_path, EVAL), write_pdf=False)
    assert result.rows[0]["status"] in ("ok", "failed")
    detail = read_table(result.point_paths[0])
    kinds = [row["check"].split()[0] for row in detail]
    assert kinds.count("oracle") == 6
    assert kinds.count("scaling") == 24
    assert kinds.count("sandwich") == 6
    exact = [row for row in detail if row["check"].split()[0] in ("scaling", "sandwich")]
    assert all(row["ok"] == "true" for row in exact)
    oracle = [row for row in detail if row["check"] == "oracle"]
    for name in ("gauss(4)", "cosine-bump(1)"):
        rows = [row for row in oracle if row["field"] == name]
        scale = max(abs(float(row["reference"])) for row in rows)
        assert all(float(row["tolerance"]) == pytest.approx(1e-4 * scale) for row in rows)


def test_threads_do_not_change_results(tmp_path):
    text = "recipe = abp-suite\nsigma = 1.5\nsigma = 1.9\nfield = dip(0.5,0.25,0)\n"
    serial = run_recipe(_cfg(tmp_path / "serial", text), write_pdf=False)
    cfg = _cfg(tmp_path / "pooled", text)
    cfg.threads = 2
    pooled = run_recipe(cfg, write_pdf=False)
    assert serial.table_path.read_bytes() == pooled.table_path.read_bytes()


def test_outputs_layout(tmp_path):
    result = run_recipe(_cfg(tmp_path, "recipe = abp-suite\nsigma = 1.5\nfield = dip(0.5,0.25,0)\n"))
    base = tmp_path / "abp-suite"
    assert result.table_path == base / "abp-suite.csv"
    assert result.summary_path == base / "summary.json"
    assert result.pdf_path == base / "summary.pdf" and result.pdf_path.exists()
    assert result.point_paths == [base / "points" / "000.csv"]


SOLVE = """
recipe = solve-suite
sigma = 1.0
spacing = 0.125
pairs = 2
oracle_spacing = 0.125
oracle_spacing = 0.0625
oracle_spacing = 0.03125
"""


def test_solve_suite_checks(tmp_path):
    result = run_recipe(_cfg(tmp_path, SOLVE), write_pdf=False)
    detail = read_table(result.point_paths[0])
    checks = [row["check"] for row in detail]
    assert checks == ["maximum principle", "comparison 0", "comparison 1", "linear oracle", "linear oracle",
                      "linear oracle", "oracle convergence"]
    ordered = [row for row in detail if row["check"].startswith(("maximum", "comparison", "linear"))]
    assert all(row["ok"] == "true" for row in ordered)
    ladder = [row for row in detail if row["check"] == "linear oracle"]
    assert [float(row["spacing"]) for row in ladder] == [0.125, 0.0625, 0.03125]
    assert float(ladder[-1]["reference"]) < float(ladder[0]["reference"])
