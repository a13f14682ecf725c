import json

import pytest

import lab
from services.gridfield import read_csv
from services.reporting_service import read_table


def test_eval_writes_one_row_per_point(tmp_path):
    code = lab.main(["--out", str(tmp_path), "--sigma", "1.5", "eval", "--field", "gauss(4)",
                     "--point", "0", "--point", "0.5", "--operator", "M_L0-"])
    assert code == 0
    rows = read_table(tmp_path / "eval" / "eval.csv")
    assert list(rows[0]) == ["x", "value", "even_contribution", "odd_contribution", "truncation_bound"]
    assert [r["x"] for r in rows] == ["0", "0.5"]
    for r in rows:
        assert float(r["truncation_bound"]) >= 0.0
        total = float(r["even_contribution"]) + float(r["odd_contribution"])
        assert float(r["value"]) == pytest.approx(total, rel=1e-12, abs=1e-15)


def test_eval_with_a_named_kernel(tmp_path):
    code = lab.main(["--out", str(tmp_path), "--sigma", "1.5", "eval", "--operator", "frac-laplace(1)"])
    assert code == 0
    assert len(read_table(tmp_path / "eval" / "eval.csv")) == 1


def test_abp_command(tmp_path):
    assert lab.main(["--out", str(tmp_path), "--sigma", "1.5", "abp"]) == 0
    summary = json.loads((tmp_path / "abp" / "summary.json").read_text())
    assert summary["max_u_minus"] == 0.5
    cubes = read_table(tmp_path / "abp" / "cubes.csv")
    assert list(cubes[0]) == ["cube_id", "diameter", "max_F", "gradient_measure", "good_fraction"]
    assert [int(c["cube_id"]) for c in cubes] == list(range(summary["cubes"]))
    gamma = read_csv(tmp_path / "abp" / "envelope.csv")
    assert gamma.flat_values.max() <= 0.0


def test_solve_command(tmp_path):
    cfg = tmp_path / "coarse.cfg"
    cfg.write_text("spacing = 0.125\n")
    code = lab.main(["--config", str(cfg), "--out", str(tmp_path), "--sigma", "1.5", "solve"])
    assert code == 0
    report = read_table(tmp_path / "solve" / "solve_report.csv")
    assert list(report[0]) == ["iterations", "converged", "final_residual", "dt_used", "tol"]
    assert report[0]["converged"] == "true"
    residuals = read_table(tmp_path / "solve" / "residuals.csv")
    assert len(residuals) == int(report[0]["iterations"]) + 1
    assert read_csv(tmp_path / "solve" / "solution.csv").spacing == 0.125


def test_regularity_command(tmp_path):
    cfg = tmp_path / "fine.cfg"
    cfg.write_text("spacing = 0.0078125\n")
    code = lab.main(["--config", str(cfg), "--out", str(tmp_path), "--sigma", "1.5",
                     "regularity", "--field", "abs-power(0.5)"])
    assert code == 0
    summary = json.loads((tmp_path / "regularity" / "summary.json").read_text())
    assert summary["alpha_min"] > 0.0
    assert "fitted_eps" in summary
    assert len(read_table(tmp_path / "regularity" / "holder.csv")) == 9


def test_sweep_unknown_recipe_is_a_config_error(tmp_path):
    assert lab.main(["--out", str(tmp_path), "sweep", "--recipe", "nope"]) == 1


def test_missing_config_file(tmp_path):
    assert lab.main(["--config", str(tmp_path / "absent.cfg"), "eval"]) == 1


def test_bad_point(tmp_path):
    assert lab.main(["--out", str(tmp_path), "eval", "--point", "0,1"]) == 1


def test_numerical_failure_exit_code(tmp_path):
    assert lab.main(["--out", str(tmp_path), "eval", "--field", "nope(1)"]) == 2
