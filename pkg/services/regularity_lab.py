"""
Regularity measurements on grid fields.

- kappa, point_estimate, measure_decay_ladder: super-level set measures of the
  dilated field u(kappa x) and their power-law fit
- oscillation_decay, holder_certificate: osc over balls r0 4^{-k} and the
  fitted Holder exponent per center
- c1alpha_pipeline: the same measurement on incremental quotients
- extremal_bounds_check, special_function_check: operator-side checks
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from config import OSC_FLOOR, OSC_SAMPLES_PER_RADIUS
from services.errors import InvalidParameterError, PreconditionError
from services.gridfield import GridField, as_points, constant_tail, incremental_quotient
from services.nonlocal_ops import ExtremalOperator, QuadratureConfig, evaluate
from services.params_kernels import EllipticityParams

logger = logging.getLogger(__name__)

_MIN_FIT_SCALES = 4


def kappa(params: EllipticityParams, sup_norm: float, eps0: float) -> float:
    """eps0 / (1 + ||u||)^{1/(sigma - tau)}."""
    if not eps0 > 0:
        raise InvalidParameterError(f"eps0 must be positive, got {eps0}")
    gap = params.sigma - params.tau
    if not gap > 0:
        raise InvalidParameterError(f"kappa needs sigma > tau, got sigma - tau = {gap}")
    if not sup_norm >= 0:
        raise InvalidParameterError("sup_norm must be >= 0")
    return eps0 / (1.0 + sup_norm) ** (1.0 / gap)


def _loglog_fit(x: np.ndarray, y: np.ndarray):
    fit = stats.linregress(np.log(x), np.log(y))
    return float(fit.slope), float(fit.rvalue**2)


# ---- Oscillation ----


@dataclass
class OscillationTrace:
    center: tuple[float, ...]
    radii: list[float]
    osc_values: list[float]
    fitted_alpha: float | None = None
    fit_r2: float | None = None
    flag: str | None = None

    def empirical_constant(self, scale: float) -> float | None:
        """max osc(B_r) / (scale r^alpha) over the traced radii."""
        if self.fitted_alpha is None or not scale > 0:
            return None
        return max(o / (scale * r**self.fitted_alpha) for r, o in zip(self.radii, self.osc_values))


def _ball_sample(center: np.ndarray, r: float, per_radius: int) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, 2 * per_radius + 1)
    if len(center) == 1:
        return center + r * t[:, None]
    gx, gy = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = pts[np.sum(pts * pts, axis=1) <= 1.0 + 1e-12]
    return center + r * pts


def oscillation_decay(u: GridField, center, r0: float, k_max: int,
                      samples_per_radius: int = OSC_SAMPLES_PER_RADIUS) -> OscillationTrace:
    """
    osc of u over B_{r_k}(center), r_k = r0 4^{-k}, for the radii whose balls
    hold at least three nodes across; osc is accumulated from the innermost ball outward
    so the sequence is monotone.
    """
    if not r0 > 0 or k_max < 0:
        raise InvalidParameterError("need r0 > 0 and k_max >= 0")
    c = as_points(center, u.dim)[0]
    radii = [r0 * 4.0**-k for k in range(k_max + 1)]
    resolved = [r for r in radii if r >= u.spacing - 1e-12]
    if len(resolved) < len(radii):
        logger.debug("[regularity] %d of %d radii below h dropped", len(radii) - len(resolved), len(radii))

    hi, lo = -math.inf, math.inf
    osc_rev = []
    for r in reversed(resolved):
        vals = u.evaluate(_ball_sample(c, r, samples_per_radius))
        hi, lo = max(hi, float(vals.max())), min(lo, float(vals.min()))
        osc_rev.append(hi - lo)
    osc = list(reversed(osc_rev))

    trace = OscillationTrace(tuple(float(v) for v in c), resolved, osc)
    keep = [(r, o) for r, o in zip(resolved, osc) if o > OSC_FLOOR]
    if len(keep) < _MIN_FIT_SCALES:
        trace.flag = "constant" if not keep and resolved else "under-resolved"
        return trace
    rs, os_ = np.array(keep).T
    trace.fitted_alpha, trace.fit_r2 = _loglog_fit(rs, os_)
    return trace


# ---- Extremal inequalities ----


@dataclass
class ExtremalBoundsReport:
    min_M_plus: float
    max_M_minus: float
    C0: float
    passed: bool
    violations: list[list[float]] = field(default_factory=list)


def _b1_nodes(u: GridField, radius: float = 1.0, stride: float = 0.125) -> np.ndarray:
    axis = np.arange(-radius, radius + 1e-12, stride)
    if u.dim == 1:
        pts = axis.reshape(-1, 1)
    else:
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return pts[np.sqrt(np.sum(pts * pts, axis=1)) < radius - 1e-12]


def extremal_bounds_check(u: GridField, params: EllipticityParams, C0: float,
                          q: QuadratureConfig | None = None, samples=None) -> ExtremalBoundsReport:
    """M^+_{L0} u >= -C0 and M^-_{L0} u <= C0 on a node sample of B_1."""
    pts = _b1_nodes(u) if samples is None else as_points(samples, u.dim)
    q = (q or QuadratureConfig()).monotone()
    plus = evaluate(ExtremalOperator(params, "+", with_drift=True), u, pts, q).value
    minus = evaluate(ExtremalOperator(params, "-", with_drift=True), u, pts, q).value
    bad = (plus < -C0) | (minus > C0)
    return ExtremalBoundsReport(
        min_M_plus=float(plus.min()),
        max_M_minus=float(minus.max()),
        C0=C0,
        passed=not bad.any(),
        violations=[p.tolist() for p in pts[bad]],
    )


# ---- Holder certificate ----


@dataclass
class HolderReport:
    traces: list[OscillationTrace]
    alpha_min: float | None
    alpha_median: float | None
    C_emp: float | None
    sup_norm: float
    C0: float
    extremal: ExtremalBoundsReport | None = None

    @property
    def passed(self) -> bool:
        return self.alpha_min is not None and self.alpha_min > 0.0


def default_centers(dim: int, radius: float = 0.5, stride: float = 0.125) -> np.ndarray:
    axis = np.arange(-radius, radius + 1e-12, stride)
    if dim == 1:
        pts = axis.reshape(-1, 1)
    else:
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return pts[np.sqrt(np.sum(pts * pts, axis=1)) <= radius + 1e-12]


def holder_certificate(u: GridField, params: EllipticityParams, C0: float, centers=None,
                       r0: float = 0.5, k_max: int = 6, verify: bool = False,
                       q: QuadratureConfig | None = None) -> HolderReport:
    """
    Oscillation decay at every center (default: a 1/8 lattice in B_{1/2}); the
    empirical constant is max osc(B_r) / ((||u|| + C0) r^alpha) with each
    center's fitted alpha.
    """
    centers = default_centers(u.dim) if centers is None else as_points(centers, u.dim)
    norm = u.sup_norm()
    traces = [oscillation_decay(u, c, r0, k_max) for c in centers]
    alphas = [t.fitted_alpha for t in traces if t.fitted_alpha is not None]

    consts = [c for c in (t.empirical_constant(norm + C0) for t in traces) if c is not None]

    report = HolderReport(
        traces=traces,
        alpha_min=min(alphas) if alphas else None,
        alpha_median=float(np.median(alphas)) if alphas else None,
        C_emp=max(consts) if consts else None,
        sup_norm=norm,
        C0=C0,
    )
    if verify:
        report.extremal = extremal_bounds_check(u, params, C0, q)
        if not report.extremal.passed:
            logger.warning("[regularity] extremal inequalities fail at %d node(s)", len(report.extremal.violations))
    logger.info(
        "[regularity] holder: %d centers, alpha min=%s median=%s",
        len(traces), report.alpha_min, report.alpha_median,
    )
    return report


# ---- C^{1,alpha} ----


@dataclass
class C1AlphaStage:
    k: int
    gamma: float
    ball_radius: float
    norm: float
    alpha_min: float | None


@dataclass
class C1AlphaReport:
    abar: float
    delta: float
    stages: list[C1AlphaStage]
    final: C1AlphaStage | None
    stopped_early: bool

    @property
    def norms_nondecreasing(self) -> bool:
        norms = [s.norm for s in self.stages] + ([self.final.norm] if self.final else [])
        return all(b >= a - 1e-12 for a, b in zip(norms, norms[1:]))

    @property
    def alpha_fit(self) -> float | None:
        return self.final.alpha_min if self.final else None


def _stage(u: GridField, k: int, gamma: float, radius: float, hstep: float, e: np.ndarray,
           r0: float, k_max: int) -> C1AlphaStage:
    w = incremental_quotient(u, hstep, e, gamma)
    centers = default_centers(u.dim, radius=0.5 * radius)
    nodes = w.nodes
    in_ball = np.sqrt(np.sum(nodes**2, axis=1)) <= radius + 1e-12
    norm = float(np.max(np.abs(w.flat_values[in_ball])))
    traces = [oscillation_decay(w, c, min(r0, 0.5 * radius), k_max) for c in centers]
    alphas = [t.fitted_alpha for t in traces if t.fitted_alpha is not None]
    return C1AlphaStage(k, gamma, radius, norm, min(alphas) if alphas else None)


def c1alpha_pipeline(u: GridField, params: EllipticityParams, abar: float, delta: float | None = None,
                     e=None, hstep: float | None = None, r0: float = 0.25, k_max: int = 6) -> C1AlphaReport:
    """
    Stage k (k = 0 .. floor(1/abar) - 1) measures the quotient
    (u(x + h e) - u(x)) / |h|^{k abar} on B_{3/4 - k delta}; the final stage
    uses the Lipschitz quotient and reports its fitted exponent.
    """
    if not 0.0 < abar <= 1.0:
        raise InvalidParameterError(f"abar must lie in (0, 1], got {abar}")
    k_count = int(math.floor(1.0 / abar))
    delta = 1.0 / (4.0 * k_count) if delta is None else delta
    e = np.eye(u.dim)[0] if e is None else np.asarray(e, dtype=float)
    hstep = u.spacing if hstep is None else hstep

    stages: list[C1AlphaStage] = []
    stopped = False
    for k in range(k_count):
        radius = 0.75 - k * delta
        if radius < 8.0 * u.spacing:
            stopped = True
            logger.info("[regularity] c1alpha: ball radius %.3g under-resolved at k=%d", radius, k)
            break
        stages.append(_stage(u, k, k * abar, radius, hstep, e, r0, k_max))

    final = None
    radius = 0.75 - k_count * delta
    if not stopped and radius >= 8.0 * u.spacing:
        final = _stage(u, k_count, 1.0, radius, hstep, e, r0, k_max)
    else:
        stopped = True
    return C1AlphaReport(abar, delta, stages, final, stopped)


# ---- Point estimate ----


@dataclass
class TailFit:
    thresholds: list[float]
    measures: list[float]
    fitted_eps: float | None
    fit_r2: float | None
    kappa: float
    ball_measure: float
    tail_constant: float | None = None
    saturated: list[bool] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.fitted_eps is None


def _unit_ball_cells(dim: int, spacing: float) -> tuple[np.ndarray, float]:
    """Cell centers of a lattice of the given spacing that lie in B_1, and the cell volume."""
    m = int(math.ceil(1.0 / spacing))
    t = (np.arange(-m, m) + 0.5) * spacing
    if dim == 1:
        pts = t.reshape(-1, 1)
    else:
        gx, gy = np.meshgrid(t, t, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return pts[np.sqrt(np.sum(pts * pts, axis=1)) < 1.0], spacing**dim


def _check_nonnegative(u: GridField):
    pts = np.concatenate([u.nodes, u.tail_sample_points()])
    vals = u.evaluate(pts)
    bad = vals < 0.0
    if bad.any():
        where = pts[bad]
        raise PreconditionError(f"u < 0 at {len(where)} point(s)", [p.tolist() for p in where[:20]])


def point_estimate(u: GridField, params: EllipticityParams, C0: float, eps0: float, thresholds=None,
                   verify: bool = True, q: QuadratureConfig | None = None,
                   min_spacing: float = 1.0 / 1024.0) -> TailFit:
    """
    Measures |{u(kappa x) > t} n B_1| on cell centers and fits measure ~ t^{-eps}.
    Thresholds where the measure is 0 or all of B_1 are left out of the fit.
    """
    _check_nonnegative(u)
    if verify:
        k_pts = _b1_nodes(u)
        minus = evaluate(ExtremalOperator(params, "-", with_drift=True), u, k_pts,
                         (q or QuadratureConfig()).monotone()).value
        bad = minus > C0
        if bad.any():
            raise PreconditionError(
                f"M^-_L0 u > C0 at {int(bad.sum())} node(s) of B_1", [p.tolist() for p in k_pts[bad]]
            )

    k = kappa(params, u.sup_norm(), eps0)
    spacing = max(u.spacing / k, min_spacing)
    cells, vol = _unit_ball_cells(u.dim, spacing)
    vals = u.evaluate(k * cells)
    ball = len(cells) * vol

    ts = np.array([2.0 ** (j / 2.0) for j in range(13)] if thresholds is None else thresholds, dtype=float)
    measures = np.array([np.count_nonzero(vals > t) * vol for t in ts])
    saturated = (measures <= 0.0) | (measures >= ball - 0.5 * vol)

    fit = TailFit(
        thresholds=ts.tolist(),
        measures=measures.tolist(),
        fitted_eps=None,
        fit_r2=None,
        kappa=k,
        ball_measure=ball,
        saturated=saturated.tolist(),
    )
    use = ~saturated
    if np.count_nonzero(use) >= 2:
        slope, r2 = _loglog_fit(ts[use], measures[use])
        fit.fitted_eps, fit.fit_r2 = max(-slope, 0.0), r2
        u0 = float(u.evaluate(np.zeros((1, u.dim)))[0])
        base = (u0 + C0) ** fit.fitted_eps
        if base > 0:
            fit.tail_constant = float(np.max(measures[use] * ts[use] ** fit.fitted_eps) / base)
    else:
        logger.info("[regularity] point estimate: degenerate level-set profile, no fit")
    return fit


@dataclass
class DecayLadder:
    levels: list[float]
    measures: list[float]
    mu_empirical: float
    cube_measure: float


def measure_decay_ladder(u: GridField, params: EllipticityParams, eps0: float, M: float,
                         k_max: int = 6, min_spacing: float = 1.0 / 1024.0) -> DecayLadder:
    """|{u(kappa x) > M^k} n Q_1| for k = 1..k_max and the largest mu with measure <= (1 - mu)^k."""
    if not M > 1:
        raise InvalidParameterError("M must exceed 1")
    k = kappa(params, u.sup_norm(), eps0)
    spacing = max(u.spacing / k, min_spacing)
    m = int(math.ceil(0.5 / spacing))
    t = (np.arange(-m, m) + 0.5) * spacing
    t = t[np.abs(t) < 0.5]
    grids = np.meshgrid(*([t] * u.dim), indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    vol = spacing**u.dim
    vals = u.evaluate(k * cells)

    levels = [M**j for j in range(1, k_max + 1)]
    measures = [float(np.count_nonzero(vals > lv) * vol) for lv in levels]
    cube = len(cells) * vol
    mus = [1.0 - (mk / cube) ** (1.0 / j) for j, mk in enumerate(measures, start=1) if mk > 0]
    return DecayLadder(levels, measures, min(mus) if mus else 1.0, cube)


# ---- Special function ----


def radial_special_function(dim: int, p: float = 1.0, s: float = 0.125, spacing: float = 1.0 / 32.0) -> GridField:
    """
    Phi = -c (max(|x|, s)^{-p} - (2 sqrt n)^{-p})_+ with c chosen so that
    Phi = -2.5 at the corners of Q_3; zero outside B_{2 sqrt n}.
    """
    if not (p > 0 and 0 < s < 0.25):
        raise InvalidParameterError("need p > 0 and 0 < s < 1/4")
    outer = 2.0 * math.sqrt(dim)
    corner = 1.5 * math.sqrt(dim)
    c = 2.5 / (corner**-p - outer**-p)

    def phi(x):
        r = np.maximum(np.sqrt(np.sum(x * x, axis=1)), s)
        return -c * np.maximum(r**-p - outer**-p, 0.0)

    box = math.ceil(outer * 4.0) / 4.0
    return GridField.from_function(phi, dim, box, spacing, constant_tail(0.0))


@dataclass
class SpecialFunctionReport:
    max_outside: float
    psi_bound: float
    tolerance: float
    passed: bool


def special_function_check(Phi: GridField, params: EllipticityParams,
                           q: QuadratureConfig | None = None, stride: float = 0.125) -> SpecialFunctionReport:
    """M^+_sigma Phi <= 0 off B_{1/4}; the max inside the closed B_{1/4} is the psi bound."""
    n = Phi.dim
    outer = 2.0 * math.sqrt(n)
    nodes, vals = Phi.nodes, Phi.flat_values
    radii = np.sqrt(np.sum(nodes**2, axis=1))

    outside_support = (radii > outer + 1e-12) & (np.abs(vals) > 1e-12)
    if outside_support.any() or Phi.tail_sup() > 1e-12:
        raise PreconditionError(
            "Phi is not supported in B_{2 sqrt n}", [p.tolist() for p in nodes[outside_support][:20]]
        )
    in_q3 = np.all(np.abs(nodes) <= 1.5 + 1e-12, axis=1)
    high = in_q3 & (vals >= -2.0)
    if high.any():
        raise PreconditionError("Phi >= -2 somewhere on Q_3", [p.tolist() for p in nodes[high][:20]])

    axis = np.arange(-outer - 0.5, outer + 0.5 + 1e-12, stride)
    grids = np.meshgrid(*([axis] * n), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    r = np.sqrt(np.sum(pts**2, axis=1))
    op = ExtremalOperator(params, "+")
    q = (q or QuadratureConfig()).monotone()
    off = evaluate(op, Phi, pts[r > 0.25 + 1e-12], q)
    inside = evaluate(op, Phi, pts[r <= 0.25 + 1e-12], q)
    max_out = float(np.max(off.value))
    tol = float(np.max(off.tolerance))
    return SpecialFunctionReport(
        max_outside=max_out,
        psi_bound=float(np.max(inside.value)) if len(inside) else 0.0,
        tolerance=tol,
        passed=max_out <= tol,
    )
