"""
Recipe runner for the nonlocal lab.

Run `python recipe_runner.py --config experiment.cfg` OR call `run_recipe(cfg)`
from code. A recipe walks the parameter grid (sigma x tau x lambda x Lambda x b);
per point it writes points/<index>.csv, then the coordinator writes
<recipe>.csv, summary.json and (optionally) summary.pdf under <out>/<recipe>/.

- grid points failing H1-H3 are skipped with the reason in their row
- a LabError at a point is logged and recorded; the run continues
- all randomness comes from numpy Generators seeded with (seed, point index)
"""

import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import ExperimentConfig, load_config_file
from services.dirichlet_solver import (
    DirichletProblem,
    Domain,
    barrier_interior,
    comparison_check,
    linear_system_oracle,
    search_exterior_barrier,
    solve,
)
from services.envelope_abp import abp_cover, brute_force_envelope_1d, convex_envelope
from services.errors import ConfigError, LabError
from services.field_catalog import (
    SMOOTH_FIELDS,
    ball_torsion,
    field_from_name,
    fractional_quad_oracle,
    smooth_oracle,
)
from services.gridfield import constant_tail
from services.nonlocal_ops import (
    ExtremalOperator,
    QuadratureConfig,
    eval_inf_sup_batch,
    eval_linear_batch,
    evaluate,
    extremal_over_family,
    scaling_check,
)
from services.params_kernels import (
    EllipticityParams,
    UniversalConstants,
    check_hypotheses,
    frac_laplace,
    random_kernel,
)
from services.regularity_lab import holder_certificate
from services.reporting_service import (
    ensure_reports_dir,
    generate_summary_pdf,
    write_summary_json,
    write_table,
)

logger = logging.getLogger(__name__)


@dataclass
class GridPoint:
    index: int
    params: EllipticityParams

    def row(self) -> dict:
        p = self.params
        return {
            "point": self.index,
            "sigma": p.sigma,
            "tau": p.tau,
            "lambda_lo": p.lambda_lo,
            "lambda_hi": p.lambda_hi,
            "b": p.b,
        }


@dataclass
class RecipeResult:
    exit_status: int
    rows: list[dict]
    table_path: Path
    summary_path: Path
    pdf_path: Path | None = None
    point_paths: list[Path] = field(default_factory=list)


# ---- Grid ----


def default_tau(sigma: float, m: float) -> float:
    return min(sigma - m, 0.9)


def default_b(params_lo: float, sigma: float, tau: float) -> float:
    """Half of the H3 budget lambda (2 - sigma) / (1 - tau) with A0 = 1."""
    return 0.5 * params_lo * (2.0 - sigma) / (1.0 - tau)


def parameter_grid(cfg: ExperimentConfig) -> list[GridPoint]:
    universal = UniversalConstants(cfg.sigma0, cfg.tau0, cfg.m, cfg.A0)
    points = []
    for sigma in cfg.sigma:
        taus = cfg.tau or [default_tau(sigma, cfg.m)]
        for tau in taus:
            for lo in cfg.lambda_lo:
                for hi in cfg.lambda_hi:
                    bs = cfg.b or [default_b(lo, sigma, tau)]
                    for b in bs:
                        params = EllipticityParams(sigma, tau, lo, hi, b, cfg.dim, universal)
                        points.append(GridPoint(len(points), params))
    return points


def _rng(cfg: ExperimentConfig, point: GridPoint) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, point.index])


def _quadrature(cfg: ExperimentConfig) -> QuadratureConfig:
    return QuadratureConfig.from_overrides(cfg.quadrature)


def _sample_points(dim: int, count: int, radius: float = 0.5) -> np.ndarray:
    t = np.linspace(-radius, radius, count)
    if dim == 1:
        return t.reshape(-1, 1)
    return np.stack([t, 0.5 * t[::-1]], axis=1)


# ---- Recipes ----
# Each recipe maps (cfg, point) -> (summary row, detail rows, detail columns).


EVAL_COLUMNS = ["check", "field", "x", "value", "reference", "error", "tolerance", "ok"]


def recipe_eval_suite(cfg: ExperimentConfig, point: GridPoint):
    p = point.params
    q = _quadrature(cfg)
    rng = _rng(cfg, point)
    names = cfg.extra_list("field") or list(SMOOTH_FIELDS)
    xs = _sample_points(p.dim, cfg.extra_int("points", 50))
    rel = cfg.extra_float("oracle_rel", 1e-4)
    detail = []

    # Linear operator against adaptive quadrature on the exact field (1-D).
    # The error is relative to the largest reference value of the field.
    spec = frac_laplace(p.with_changes(b=0.0), 1.0)
    fields = {}
    for name in names:
        u = field_from_name(name, p.dim, cfg.box_radius, cfg.spacing)
        fields[name] = u
        if p.dim != 1:
            continue
        batch = eval_linear_batch(spec, u, xs, q)
        f = smooth_oracle(name)
        refs = np.array([fractional_quad_oracle(f, float(x), p.sigma) for x in xs[:, 0]])
        tol = rel * float(np.max(np.abs(refs)))
        for i, x in enumerate(xs[:, 0]):
            err = abs(batch.value[i] - refs[i])
            detail.append({
                "check": "oracle", "field": name, "x": float(x), "value": float(batch.value[i]),
                "reference": float(refs[i]), "error": err, "tolerance": tol, "ok": err <= tol,
            })

    # Scaling law.
    mid = xs[len(xs) // 2] * 0.5
    for name in names[: cfg.extra_int("scaling_fields", 5)]:
        for op in ("M+", "M-", "D_tau"):
            for alpha in (0.5, 2.0):
                for beta in (0.5, 2.0):
                    chk = scaling_check(fields[name], p, alpha, beta, mid, q, op)
                    detail.append({
                        "check": f"scaling {op} a={alpha:g} b={beta:g}", "field": name,
                        "x": float(mid[0]), "value": chk.lhs, "reference": chk.rhs,
                        "error": chk.gap, "tolerance": chk.tolerance, "ok": chk.ok,
                    })

    # Sandwich and the four-operator chain over random L0~ kernels.
    kernels = [random_kernel(p, rng) for _ in range(cfg.extra_int("kernels", 20))]
    for name in names[: cfg.extra_int("sandwich_fields", 5)]:
        u = fields[name]
        lo = evaluate(ExtremalOperator(p, "-", with_drift=True), u, xs, q)
        hi = evaluate(ExtremalOperator(p, "+", with_drift=True), u, xs, q)
        fam = extremal_over_family(kernels, u, xs, q)
        infsup = eval_inf_sup_batch([[k] for k in kernels], u, xs, q)
        for i, x in enumerate(xs[:, 0]):
            slack = lo.tolerance[i] + hi.tolerance[i] + fam.tolerance[i]
            chain = [lo.value[i], fam.inf[i], infsup.value[i], fam.sup[i], hi.value[i]]
            ok = all(b_ >= a_ - slack for a_, b_ in zip(chain, chain[1:]))
            detail.append({
                "check": "sandwich", "field": name, "x": float(x), "value": float(fam.sup[i]),
                "reference": float(hi.value[i]),
                "error": float(max(a_ - b_ for a_, b_ in zip(chain, chain[1:]))),
                "tolerance": float(slack), "ok": ok,
            })

    failed = sum(1 for r in detail if not r["ok"])
    row = point.row() | {"checks": len(detail), "failed": failed, "status": "ok" if not failed else "failed"}
    return row, detail, EVAL_COLUMNS


BARRIER_COLUMNS = ["kind", "s", "C", "alpha_b", "value", "ok"]


def recipe_barrier_suite(cfg: ExperimentConfig, point: GridPoint):
    p = point.params
    q = _quadrature(cfg)
    interior = barrier_interior(p, q=q)
    exterior = search_exterior_barrier(p, q)
    detail = [
        {"kind": "interior", "s": s, "value": m, "ok": m > 0.0}
        for s, m in sorted(interior.minima.items(), reverse=True)
    ]
    if exterior is not None:
        detail.append({
            "kind": "exterior", "C": exterior.C, "alpha_b": exterior.alpha_b,
            "value": exterior.ring_max, "ok": exterior.passed,
        })
    ok = interior.ok and exterior is not None
    row = point.row() | {
        "s_star": interior.s_star,
        "delta_star": interior.delta_star,
        "C": exterior.C if exterior else None,
        "alpha_b": exterior.alpha_b if exterior else None,
        "ring_max": exterior.ring_max if exterior else None,
        "status": "ok" if ok else "failed",
    }
    return row, detail, BARRIER_COLUMNS


DEFAULT_DIPS = (
    "dip(0.5,0.25,0)",
    "dip(1,0.3,0.2)",
    "dip(0.25,0.5,-0.1)",
    "dip(0.75,0.2,0.5)",
    "dip(0.4,0.4,0)",
)
ABP_COLUMNS = ["field", "contacts", "cubes", "unresolved", "gradient_measure", "max_u_minus", "ratio",
               "envelope_gap"]


def recipe_abp_suite(cfg: ExperimentConfig, point: GridPoint):
    p = point.params
    names = cfg.extra_list("field") or list(DEFAULT_DIPS)
    detail = []
    for name in names:
        u = field_from_name(name, p.dim, cfg.box_radius, cfg.spacing)
        env = convex_envelope(u)
        cover = abp_cover(u, env, 0.0, p)
        gap = None
        if p.dim == 1:
            gap = float(np.max(np.abs(brute_force_envelope_1d(u) - env.gamma.flat_values)))
        detail.append({
            "field": name,
            "contacts": int(np.count_nonzero(env.contact_mask)),
            "cubes": len(cover.cubes),
            "unresolved": cover.unresolved,
            "gradient_measure": cover.gradient_measure_sum,
            "max_u_minus": cover.max_u_minus,
            "ratio": cover.ratio,
            "envelope_gap": gap,
        })
    ratios = [r["ratio"] for r in detail if r["ratio"]]
    band = max(ratios) / min(ratios) if ratios else None
    row = point.row() | {
        "fields": len(detail),
        "ratio_min": min(ratios) if ratios else None,
        "ratio_max": max(ratios) if ratios else None,
        "ratio_band": band,
        "status": "ok" if band is not None and band <= 4.0 else "failed",
    }
    return row, detail, ABP_COLUMNS


SOLVE_COLUMNS = ["check", "spacing", "iterations", "converged", "value", "reference", "tolerance", "ok"]


def _oracle_ladder(cfg: ExperimentConfig, p: EllipticityParams, q: QuadratureConfig, tol: float) -> list[dict]:
    """
    Single-kernel problem on the unit ball with a closed-form solution,
    solved at each spacing by the scheme and by the dense linear solve.
    """
    spacings = [float(v) for v in cfg.extra_list("oracle_spacing")] or [1 / 64, 1 / 128, 1 / 256]
    spec = frac_laplace(p.with_changes(b=0.0), 1.0)
    f, exact = ball_torsion(p.sigma)
    rows, errors = [], []
    for h in spacings:
        g = field_from_name("constant(0)", 1, cfg.box_radius, h)
        problem = DirichletProblem(Domain("ball", 1.0), g, f, spec, p, q)
        ul, rep = solve(problem, tol, cfg.solver_max_iter)
        oracle = linear_system_oracle(problem)
        gap = float(np.max(np.abs(ul.flat_values - oracle.flat_values)))
        err = float(np.max(np.abs(oracle.flat_values - exact(oracle.nodes))))
        errors.append(err)
        rows.append({"check": "linear oracle", "spacing": h, "iterations": rep.iterations,
                     "converged": rep.converged, "value": gap, "reference": err,
                     "tolerance": 10.0 * tol, "ok": gap <= 10.0 * tol})
        logger.info("[solve] oracle h=%g: |scheme - oracle|=%.2e, |oracle - exact|=%.3e", h, gap, err)
    shrinking = all(b < a for a, b in zip(errors, errors[1:]))
    rows.append({"check": "oracle convergence", "spacing": spacings[-1], "value": errors[-1],
                 "reference": errors[0], "ok": shrinking})
    return rows


def recipe_solve_suite(cfg: ExperimentConfig, point: GridPoint):
    p = point.params
    q = _quadrature(cfg)
    rng = _rng(cfg, point)
    domain = Domain("ball", cfg.extra_float("domain_radius", 1.0))
    g = field_from_name(cfg.extra("exterior", "gauss(4)"), p.dim, cfg.box_radius, cfg.spacing)
    tol, max_iter = cfg.solver_tol, cfg.solver_max_iter
    detail = []

    u, rep = solve(DirichletProblem(domain, g, 0.0, "M_L0+", p, q), tol, max_iter)
    lo, hi = float(g.flat_values.min()), float(g.flat_values.max())
    inside = domain.contains(u.nodes)
    vals = u.flat_values[inside]
    ok = bool(vals.min() >= lo - 1e-8 and vals.max() <= hi + 1e-8)
    detail.append({"check": "maximum principle", "spacing": cfg.spacing, "iterations": rep.iterations,
                   "converged": rep.converged, "value": float(vals.max() - hi), "tolerance": 1e-8, "ok": ok})

    # Ordered pairs: g <= g2 everywhere and f = 0 >= f2 + 0.05, so u <= u2.
    tail = g.tail.constant if g.tail.kind == "constant" else 0.0
    for k in range(cfg.extra_int("pairs", 10)):
        lift = 0.01 + rng.uniform(0.0, 0.1, size=g.values.shape)
        g2 = g.with_values(g.values + lift)
        if g.tail.kind == "constant":
            g2 = g2.with_tail(constant_tail(tail + 0.01))
        f2 = -(0.05 + float(rng.uniform(0.0, 0.5)))
        u2, rep2 = solve(DirichletProblem(domain, g2, f2, "M_L0+", p, q), tol, max_iter)
        cmp = comparison_check(u, u2, domain)
        detail.append({"check": f"comparison {k}", "spacing": cfg.spacing, "iterations": rep2.iterations,
                       "converged": rep2.converged, "value": cmp.worst_violation, "reference": f2,
                       "tolerance": 1e-8, "ok": cmp.passed})

    if p.dim == 1:
        detail.extend(_oracle_ladder(cfg, p, q, tol))

    failed = sum(1 for r in detail if not r["ok"])
    row = point.row() | {"checks": len(detail), "failed": failed, "status": "ok" if not failed else "failed"}
    return row, detail, SOLVE_COLUMNS


REGULARITY_COLUMNS = ["center", "alpha_fit", "fit_r2", "C_emp", "scales"]


def recipe_regularity_sweep(cfg: ExperimentConfig, point: GridPoint):
    p = point.params
    q = _quadrature(cfg)
    domain = Domain("ball", 1.0)
    g = field_from_name(cfg.extra("exterior", "sign-strips(8)"), p.dim, cfg.box_radius, cfg.spacing)
    u, rep = solve(DirichletProblem(domain, g, 0.0, "M_L0+", p, q), cfg.solver_tol, cfg.solver_max_iter)
    cert = holder_certificate(u, p, C0=0.0)
    norm = cert.sup_norm + cert.C0
    detail = []
    for t in cert.traces:
        detail.append({"center": list(t.center), "alpha_fit": t.fitted_alpha, "fit_r2": t.fit_r2,
                       "C_emp": t.empirical_constant(norm), "scales": len(t.radii)})
    row = point.row() | {
        "iterations": rep.iterations,
        "converged": rep.converged,
        "alpha_min": cert.alpha_min,
        "alpha_median": cert.alpha_median,
        "C_emp": cert.C_emp,
        "status": "ok" if cert.alpha_min is not None and cert.alpha_min >= 0.05 else "failed",
    }
    return row, detail, REGULARITY_COLUMNS


RECIPES = {
    "eval-suite": recipe_eval_suite,
    "barrier-suite": recipe_barrier_suite,
    "abp-suite": recipe_abp_suite,
    "solve-suite": recipe_solve_suite,
    "regularity-sweep": recipe_regularity_sweep,
}

SUMMARY_COLUMNS = {
    "eval-suite": ["checks", "failed"],
    "barrier-suite": ["s_star", "delta_star", "C", "alpha_b", "ring_max"],
    "abp-suite": ["fields", "ratio_min", "ratio_max", "ratio_band"],
    "solve-suite": ["checks", "failed"],
    "regularity-sweep": ["iterations", "converged", "alpha_min", "alpha_median", "C_emp"],
}
BASE_COLUMNS = ["point", "sigma", "tau", "lambda_lo", "lambda_hi", "b"]


# ---- Runner ----


def _run_point(cfg: ExperimentConfig, recipe, point: GridPoint, points_dir: Path):
    hyp = check_hypotheses(point.params)
    if not hyp.ok:
        reason = "hypotheses fail: " + ", ".join(hyp.failures())
        logger.info("[skip] point %d (sigma=%g tau=%g b=%g): %s",
                    point.index, point.params.sigma, point.params.tau, point.params.b, reason)
        return point.row() | {"status": "skipped", "reason": reason}, None
    try:
        row, detail, columns = recipe(cfg, point)
    except LabError as e:
        logger.warning("[warn] point %d failed: %s", point.index, e)
        return point.row() | {"status": "error", "reason": f"{type(e).__name__}: {e}"}, None
    path = write_table(detail, columns, points_dir / f"{point.index:03d}.csv")
    return row | {"reason": ""}, path


def _uniformity(rows: list[dict]) -> dict:
    alphas = [r["alpha_min"] for r in rows if r.get("alpha_min") is not None]
    if not alphas:
        return {"alpha_min": None, "alpha_spread": None, "uniform": False}
    spread = max(alphas) / min(alphas) if min(alphas) > 0 else math.inf
    return {"alpha_min": min(alphas), "alpha_spread": spread,
            "uniform": min(alphas) >= 0.05 and spread <= 3.0}


def run_recipe(cfg: ExperimentConfig, write_pdf: bool = True) -> RecipeResult:
    """Execute cfg.recipe over the parameter grid and write its reports."""
    if cfg.recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {cfg.recipe!r}; known: {', '.join(sorted(RECIPES))}")
    recipe = RECIPES[cfg.recipe]
    out = ensure_reports_dir(Path(cfg.out) / cfg.recipe)
    points_dir = ensure_reports_dir(out / "points")
    grid = parameter_grid(cfg)
    logger.info("[recipe] %s: %d grid point(s), %d thread(s), out=%s",
                cfg.recipe, len(grid), cfg.threads, out)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda pt: _run_point(cfg, recipe, pt, points_dir), grid))
    else:
        results = [_run_point(cfg, recipe, pt, points_dir) for pt in grid]

    rows = [r for r, _ in results]
    point_paths = [p for _, p in results if p is not None]
    columns = BASE_COLUMNS + SUMMARY_COLUMNS[cfg.recipe] + ["status", "reason"]
    table_path = write_table(rows, columns, out / f"{cfg.recipe}.csv")

    counts = {s: sum(1 for r in rows if r["status"] == s) for s in ("ok", "failed", "skipped", "error")}
    summary = {
        "recipe": cfg.recipe,
        "seed": cfg.seed,
        "dim": cfg.dim,
        "box_radius": cfg.box_radius,
        "spacing": cfg.spacing,
        "quadrature": dict(sorted(cfg.quadrature.items())),
        "points": len(rows),
        "counts": counts,
        "rows": rows,
    }
    if cfg.recipe == "regularity-sweep":
        summary["uniformity"] = _uniformity(rows)
    if cfg.recipe == "abp-suite":
        bands = [r["ratio_band"] for r in rows if r.get("ratio_band") is not None]
        summary["ratio_band_max"] = max(bands) if bands else None
    summary_path = write_summary_json(summary, out / "summary.json")

    pdf_path = None
    if write_pdf:
        pdf_path = out / "summary.pdf"
        notes = [f"seed {cfg.seed}, dim {cfg.dim}, h = {cfg.spacing:g}, R = {cfg.box_radius:g}"]
        notes += [f"{k}: {v}" for k, v in counts.items() if v]
        generate_summary_pdf(f"Recipe {cfg.recipe}", rows, BASE_COLUMNS[1:] + ["status"], pdf_path, notes)

    logger.info("[recipe] %s done: %s", cfg.recipe, counts)
    return RecipeResult(0, rows, table_path, summary_path, pdf_path, point_paths)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run a named lab recipe from a config file.")
    parser.add_argument("--config", required=True)
    parser.add_argument("--no-pdf", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s %(message)s")
    try:
        cfg = ExperimentConfig.from_mapping(load_config_file(args.config))
        return run_recipe(cfg, write_pdf=not args.no_pdf).exit_status
    except ConfigError as e:
        logger.error("[config] %s", e)
        return 1
    except LabError as e:
        logger.error("[warn] %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
