"""
Command-line entry point.

    python lab.py [--config PATH] [--out DIR] [--seed N] [--threads N] <command> ...

Commands: eval, solve, barrier-check, abp, regularity, sweep.
Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from config import LAB_LOG_LEVEL, ExperimentConfig, load_config_file
from recipe_runner import parameter_grid, run_recipe
from services.dirichlet_solver import DirichletProblem, Domain, build_operator, solve
from services.envelope_abp import abp_cover, convex_envelope
from services.errors import ConfigError, LabError, PreconditionError
from services.field_catalog import field_from_name
from services.gridfield import GridField, read_csv, write_csv
from services.nonlocal_ops import DTauOperator, QuadratureConfig, evaluate
from services.params_kernels import EllipticityParams, kernel_from_name
from services.regularity_lab import holder_certificate, point_estimate
from services.reporting_service import ensure_reports_dir, write_summary_json, write_table

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["iterations", "converged", "final_residual", "dt_used", "tol"]
CUBE_COLUMNS = ["cube_id", "diameter", "max_F", "gradient_measure", "good_fraction"]


# ======================================================
# Helpers
# ======================================================

def build_config(args) -> ExperimentConfig:
    raw = load_config_file(args.config) if args.config else {}
    cfg = ExperimentConfig.from_mapping(raw)
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    for key in ("sigma", "tau", "b"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, [value])
    if getattr(args, "dim", None) is not None:
        cfg.dim = args.dim
    return cfg


def first_params(cfg: ExperimentConfig) -> EllipticityParams:
    grid = parameter_grid(cfg)
    if not grid:
        raise ConfigError("parameter grid is empty")
    return grid[0].params


def load_field(cfg: ExperimentConfig, name: str | None, path: str | None, default: str) -> GridField:
    if path:
        return read_csv(path)
    return field_from_name(name or cfg.extra("field", default), cfg.dim, cfg.box_radius, cfg.spacing)


def parse_points(values: list[str] | None, dim: int) -> np.ndarray:
    if not values:
        return np.zeros((1, dim))
    try:
        pts = [[float(c) for c in v.split(",")] for v in values]
    except ValueError as exc:
        raise ConfigError(f"bad --point value in {values}") from exc
    if any(len(p) != dim for p in pts):
        raise ConfigError(f"--point needs {dim} coordinate(s)")
    return np.array(pts)


def resolve_operator(name: str, params: EllipticityParams):
    if name == "D_tau":
        return DTauOperator(params)
    if name.startswith(("M+", "M-", "M_L0")):
        return build_operator(name, params)
    return build_operator(kernel_from_name(name, params), params)


# ======================================================
# Commands
# ======================================================

def cmd_eval(cfg: ExperimentConfig, args) -> int:
    params = first_params(cfg)
    u = load_field(cfg, args.field, args.field_file, "gauss(4)")
    pts = parse_points(args.point, u.dim)
    op = resolve_operator(args.operator, params)
    batch = evaluate(op, u, pts, QuadratureConfig.from_overrides(cfg.quadrature))
    coords = ["x"] if u.dim == 1 else ["x", "y"]
    rows = []
    for i, p in enumerate(pts):
        v = batch.at(i)
        rows.append(dict(zip(coords, p.tolist())) | {
            "value": v.value,
            "even_contribution": v.even_contribution,
            "odd_contribution": v.odd_contribution,
            "truncation_bound": v.truncation_bound,
        })
        logger.info("[eval] %s at %s = %.10g (tol %.2e)", op.describe(), p.tolist(), v.value, v.tolerance)
    columns = coords + ["value", "even_contribution", "odd_contribution", "truncation_bound"]
    write_table(rows, columns, Path(cfg.out) / "eval" / "eval.csv")
    return 0


def cmd_solve(cfg: ExperimentConfig, args) -> int:
    params = first_params(cfg)
    g = load_field(cfg, args.exterior, args.exterior_file, "gauss(4)")
    problem = DirichletProblem(
        Domain(args.domain, args.radius), g, args.rhs, resolve_operator(args.operator, params), params,
        QuadratureConfig.from_overrides(cfg.quadrature),
    )
    u, report = solve(problem, cfg.solver_tol, cfg.solver_max_iter)
    out = ensure_reports_dir(Path(cfg.out) / "solve")
    write_csv(u, out / "solution.csv")
    write_table([asdict(report)], REPORT_COLUMNS, out / "solve_report.csv")
    write_table([{"iteration": i, "residual": r} for i, r in enumerate(report.residual_history)],
                ["iteration", "residual"], out / "residuals.csv")
    summary = asdict(report) | {"params": params.as_dict(), "operator": args.operator}
    summary["residual_history"] = report.residual_history[-10:]
    write_summary_json(summary, out / "summary.json")
    return 0


def cmd_barrier(cfg: ExperimentConfig, args) -> int:
    cfg.recipe = "barrier-suite"
    return run_recipe(cfg, write_pdf=not args.no_pdf).exit_status


def cmd_abp(cfg: ExperimentConfig, args) -> int:
    params = first_params(cfg)
    u = load_field(cfg, args.field, args.field_file, "dip(0.5,0.25,0)")
    env = convex_envelope(u)
    cover = abp_cover(u, env, args.rhs, params)
    out = ensure_reports_dir(Path(cfg.out) / "abp")
    rows = [
        {"cube_id": i, "diameter": c.diameter, "max_F": c.max_F, "gradient_measure": c.gradient_measure,
         "good_fraction": c.good_fraction}
        for i, c in enumerate(cover.cubes)
    ]
    write_table(rows, CUBE_COLUMNS, out / "cubes.csv")
    write_csv(env.gamma, out / "envelope.csv")
    write_summary_json(
        {"gradient_measure_sum": cover.gradient_measure_sum, "max_u_minus": cover.max_u_minus,
         "ratio": cover.ratio, "rho0": cover.rho0, "d0": cover.d0, "mu": cover.mu,
         "dilation": cover.dilation, "unresolved": cover.unresolved, "cubes": len(cover.cubes)},
        out / "summary.json",
    )
    logger.info("[abp] %d cube(s), ratio=%s", len(cover.cubes), cover.ratio)
    return 0


def cmd_regularity(cfg: ExperimentConfig, args) -> int:
    params = first_params(cfg)
    u = load_field(cfg, args.field, args.solution, "abs-power(0.5)")
    out = ensure_reports_dir(Path(cfg.out) / "regularity")
    cert = holder_certificate(u, params, args.C0)
    norm = cert.sup_norm + cert.C0
    rows = []
    for t in cert.traces:
        rows.append({"center": list(t.center), "alpha_fit": t.fitted_alpha,
                     "C_emp": t.empirical_constant(norm), "fit_r2": t.fit_r2})
    write_table(rows, ["center", "alpha_fit", "C_emp", "fit_r2"], out / "holder.csv")

    summary = {"alpha_min": cert.alpha_min, "alpha_median": cert.alpha_median, "C_emp": cert.C_emp}
    try:
        fit = point_estimate(u, params, args.C0, args.eps0, verify=False)
    except PreconditionError as e:
        logger.info("[skip] tail fit: %s", e)
    else:
        write_table(
            [{"t": t, "measure": m, "saturated": s} for t, m, s in zip(fit.thresholds, fit.measures, fit.saturated)],
            ["t", "measure", "saturated"], out / "tail_fit.csv",
        )
        summary |= {"fitted_eps": fit.fitted_eps, "fit_r2": fit.fit_r2, "kappa": fit.kappa,
                    "tail_constant": fit.tail_constant}
    write_summary_json(summary, out / "summary.json")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    cfg.recipe = args.recipe or cfg.extra("sweep_recipe", "regularity-sweep")
    return run_recipe(cfg, write_pdf=not args.no_pdf).exit_status


# ======================================================
# Parser
# ======================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Nonlocal extremal operator lab.")
    parser.add_argument("--config", help="flat key = value experiment file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--no-pdf", action="store_true")
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--b", type=float)
    parser.add_argument("--dim", type=int, choices=(1, 2))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate an operator at points")
    p.add_argument("--field")
    p.add_argument("--field-file")
    p.add_argument("--operator", default="M_L0+", help="M+, M-, M_L0+, M_L0-, D_tau or a kernel name")
    p.add_argument("--point", action="append", help="comma-separated coordinates; repeatable")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("solve", help="solve the Dirichlet problem on a ball or box")
    p.add_argument("--exterior")
    p.add_argument("--exterior-file")
    p.add_argument("--operator", default="M_L0+")
    p.add_argument("--rhs", type=float, default=0.0)
    p.add_argument("--domain", choices=("ball", "box"), default="ball")
    p.add_argument("--radius", type=float, default=1.0)
    p.set_defaults(handler=cmd_solve)

    p = sub.add_parser("barrier-check", help="interior and exterior barrier certificates over the grid")
    p.set_defaults(handler=cmd_barrier)

    p = sub.add_parser("abp", help="convex envelope and ABP cube cover")
    p.add_argument("--field")
    p.add_argument("--field-file")
    p.add_argument("--rhs", type=float, default=0.0)
    p.set_defaults(handler=cmd_abp)

    p = sub.add_parser("regularity", help="Holder certificate and tail fit of a field or solution")
    p.add_argument("--field")
    p.add_argument("--solution", help="CSV written by `solve`")
    p.add_argument("--C0", type=float, default=0.0)
    p.add_argument("--eps0", type=float, default=1.0)
    p.set_defaults(handler=cmd_regularity)

    p = sub.add_parser("sweep", help="run a named recipe (default regularity-sweep)")
    p.add_argument("--recipe")
    p.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, LAB_LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s %(message)s")
    try:
        cfg = build_config(args)
        logger.info("[startup] command=%s out=%s seed=%d", args.command, cfg.out, cfg.seed)
        return args.handler(cfg, args)
    except ConfigError as e:
        logger.error("[config] %s", e)
        return 1
    except LabError as e:
        logger.error("[warn] %s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
