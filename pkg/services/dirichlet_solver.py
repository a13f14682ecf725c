"""
Dirichlet problem I u = f in Omega, u = g outside, by monotone pseudo-time
iteration, plus the barrier families and comparison checks. The scheme and the
barrier checks sample u multilinearly (QuadratureConfig.monotone).

The explicit step u <- u + dt (I_h u - f) is order preserving when
dt <= 1 / (center weight of I_h); the center weight is the derivative bound of
the discrete operator with respect to u(x), computed from the quadrature
weights, the inner stencil model and the far-field mass.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from config import SOLVER_DT_SAFETY, SOLVER_LOG_EVERY, SOLVER_MAX_ITER, SOLVER_TOL
from services.errors import InvalidParameterError, PreconditionError, StiffnessError
from services.gridfield import GridField, as_points, constant_tail, rescale
from services.nonlocal_ops import (
    DifferenceSampler,
    ExtremalOperator,
    InfSupOperator,
    LinearOperator,
    NonlocalOperator,
    QuadratureConfig,
    evaluate,
)
from services.params_kernels import EllipticityParams, KernelSpec, check_hypotheses, verify_kernel_class

logger = logging.getLogger(__name__)

_MIN_DT = 1e-14


# ---- Problem ----


@dataclass(frozen=True)
class Domain:
    """Open ball (|x - c| < radius) or open box (|x - c|_inf < radius)."""

    kind: str = "ball"
    radius: float = 1.0
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ball", "box"):
            raise InvalidParameterError(f"domain kind must be 'ball' or 'box', got {self.kind!r}")
        if not self.radius > 0:
            raise InvalidParameterError("domain radius must be positive")

    def _shifted(self, pts: np.ndarray) -> np.ndarray:
        c = np.zeros(pts.shape[1]) if self.center is None else np.asarray(self.center, dtype=float)
        return pts - c

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self._shifted(pts)
        if self.kind == "ball":
            dist = np.sqrt(np.sum(d * d, axis=1))
        else:
            dist = np.max(np.abs(d), axis=1)
        return dist < self.radius - 1e-12

    def extent(self, dim: int) -> float:
        """Largest |x|_inf over the closure."""
        c = np.zeros(dim) if self.center is None else np.abs(np.asarray(self.center, dtype=float))
        return float(np.max(c)) + self.radius

    def outward_normal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        d = self._shifted(x[None, :])[0]
        if self.kind == "ball":
            return d / np.linalg.norm(d)
        e = np.zeros_like(d)
        k = int(np.argmax(np.abs(d)))
        e[k] = math.copysign(1.0, d[k])
        return e


OperatorLike = NonlocalOperator | KernelSpec | str | list


def build_operator(operator: OperatorLike, params: EllipticityParams) -> NonlocalOperator:
    """Tags 'M+', 'M-', 'M_L0+', 'M_L0-'; a KernelSpec; or a family [[K, ...], ...]."""
    if isinstance(operator, NonlocalOperator):
        return operator
    if isinstance(operator, KernelSpec):
        return LinearOperator(operator)
    if isinstance(operator, str):
        tags = {
            "M+": ("+", False),
            "M-": ("-", False),
            "M_L0+": ("+", True),
            "M_L0-": ("-", True),
        }
        if operator not in tags:
            raise InvalidParameterError(f"unknown operator tag {operator!r}; known: {', '.join(tags)}")
        sign, drift = tags[operator]
        return ExtremalOperator(params, sign, with_drift=drift)
    return InfSupOperator(operator)


@dataclass(frozen=True, eq=False)
class DirichletProblem:
    domain: Domain
    exterior_data: GridField
    rhs: GridField | float
    operator: OperatorLike
    params: EllipticityParams
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        g = self.exterior_data
        if self.domain.extent(g.dim) > g.box_radius - g.spacing + 1e-12:
            raise InvalidParameterError(
                f"domain must sit strictly inside the grid box (extent {self.domain.extent(g.dim)}, "
                f"box {g.box_radius}, h {g.spacing})"
            )


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    dt_used: float = 0.0
    converged: bool = False
    final_residual: float = math.inf
    tol: float = SOLVER_TOL


class DirichletScheme:
    """Discrete operator restricted to the interior nodes of a problem."""

    def __init__(self, problem: DirichletProblem):
        g = problem.exterior_data
        self.problem = problem
        self.grid = g
        self.op = build_operator(problem.operator, problem.params)
        if self.op.dim != g.dim:
            raise InvalidParameterError("operator and grid dimensions differ")
        self.qnodes = problem.quadrature.monotone().resolve(g)
        self.interior = problem.domain.contains(g.nodes)
        if not self.interior.any():
            raise InvalidParameterError("domain contains no grid nodes")
        pts = g.nodes[self.interior]
        self.sampler = DifferenceSampler(g, pts, self.qnodes)
        rhs = problem.rhs
        self.f = rhs.evaluate(pts) if isinstance(rhs, GridField) else np.full(len(pts), float(rhs))

        weight = self.op.center_weight(self.qnodes)
        self.dt = SOLVER_DT_SAFETY / weight if weight > 0 else math.inf
        if not (math.isfinite(self.dt) and self.dt > _MIN_DT):
            raise StiffnessError(f"pseudo-time step underflow: dt={self.dt:.3g} (center weight {weight:.3g})")

    def apply(self, values: np.ndarray) -> np.ndarray:
        """I_h u at the interior nodes."""
        return self.op.reduce(self.sampler.samples(values), self.qnodes).value

    def residual(self, values: np.ndarray) -> np.ndarray:
        return self.apply(values) - self.f

    def step(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=float).ravel()
        out[self.interior] += self.dt * self.residual(out)
        return out


def jacobi_step(scheme: DirichletScheme, values) -> np.ndarray:
    """One pseudo-time update; exterior nodes are left untouched."""
    return scheme.step(values)


@lru_cache(maxsize=256)
def _in_l0_tilde(spec: KernelSpec) -> bool:
    return verify_kernel_class(spec).l0_tilde


def _verify_family(op: NonlocalOperator):
    members = []
    if isinstance(op, LinearOperator):
        members = [op.spec]
    elif isinstance(op, InfSupOperator):
        members = [m.spec for m in op.members]
    bad = [spec.name for spec in members if not _in_l0_tilde(spec)]
    if bad:
        raise PreconditionError(f"kernels not in L0~: {', '.join(bad)}", bad)


def solve(problem: DirichletProblem, tol: float = SOLVER_TOL,
          max_iter: int = SOLVER_MAX_ITER) -> tuple[GridField, SolveReport]:
    """Iterate from u = g until the interior residual sup-norm is <= tol."""
    hyp = check_hypotheses(problem.params)
    if not hyp.ok:
        raise PreconditionError(f"hypotheses fail: {', '.join(hyp.failures())}", hyp.failures())
    scheme = DirichletScheme(problem)
    _verify_family(scheme.op)

    values = np.array(problem.exterior_data.flat_values, dtype=float)
    report = SolveReport(dt_used=scheme.dt, tol=tol)
    logger.info(
        "[solve] %s on %s(r=%g): %d interior nodes, dt=%.3g",
        scheme.op.describe(), problem.domain.kind, problem.domain.radius,
        int(scheme.interior.sum()), scheme.dt,
    )
    for it in range(max_iter + 1):
        res = scheme.residual(values)
        r = float(np.max(np.abs(res)))
        report.residual_history.append(r)
        report.final_residual = r
        if not math.isfinite(r):
            raise StiffnessError(f"residual blew up at iteration {it}")
        if r <= tol:
            report.converged = True
            break
        if it == max_iter:
            break
        values[scheme.interior] += scheme.dt * res
        report.iterations = it + 1
        if SOLVER_LOG_EVERY and report.iterations % SOLVER_LOG_EVERY == 0:
            logger.debug("[solve] iter=%d residual=%.3e", report.iterations, r)

    if report.converged:
        logger.info("[solve] converged in %d iterations (residual %.2e)", report.iterations, report.final_residual)
    else:
        logger.warning(
            "[solve] no convergence after %d iterations (residual %.2e > %.2e)",
            report.iterations, report.final_residual, tol,
        )
    return problem.exterior_data.with_values(values), report


def linear_system_oracle(problem: DirichletProblem) -> GridField:
    """
    Dense solve of the discretized single-kernel problem: the affine map
    v -> I_h v is assembled column by column on the interior unknowns.
    """
    scheme = DirichletScheme(problem)
    if not isinstance(scheme.op, LinearOperator):
        raise InvalidParameterError("linear_system_oracle needs a single linear kernel")
    base = np.array(problem.exterior_data.flat_values, dtype=float)
    base[scheme.interior] = 0.0
    b0 = scheme.apply(base)
    idx = np.nonzero(scheme.interior)[0]
    A = np.empty((len(idx), len(idx)))
    for j, node in enumerate(idx):
        unit = base.copy()
        unit[node] = 1.0
        A[:, j] = scheme.apply(unit) - b0
    x = np.linalg.solve(A, scheme.f - b0)
    out = base.copy()
    out[idx] = x
    return problem.exterior_data.with_values(out)


# ---- Comparison ----


@dataclass(frozen=True)
class ComparisonReport:
    passed: bool
    worst_violation: float
    location: tuple[float, ...] | None
    margin: float


def comparison_check(u: GridField, v: GridField, domain: Domain, tol: float = 1e-8) -> ComparisonReport:
    """u <= v + tol on the nodes of Omega, given u <= v outside."""
    if (u.dim, u.box_radius, u.spacing) != (v.dim, v.box_radius, v.spacing):
        raise InvalidParameterError("comparison_check needs fields on the same grid")
    inside = domain.contains(u.nodes)
    diff = u.flat_values - v.flat_values
    outside_bad = (~inside) & (diff > tol)
    if outside_bad.any():
        where = u.nodes[outside_bad]
        raise PreconditionError(
            f"u > v at {len(where)} exterior node(s)", [p.tolist() for p in where[:20]]
        )
    d = diff[inside]
    k = int(np.argmax(d))
    worst = float(d[k])
    location = tuple(float(c) for c in u.nodes[inside][k])
    return ComparisonReport(
        passed=worst <= tol,
        worst_violation=worst,
        location=location,
        margin=float(-worst),
    )


# ---- Barriers ----

_BARRIER_BOX = 4.0
_BARRIER_SPACING = 1.0 / 16.0


def interior_barrier_field(dim: int, spacing: float = _BARRIER_SPACING) -> GridField:
    """phi(x) = min(1, |x|^2 / 4), equal to 1 beyond the box."""
    return GridField.from_function(
        lambda x: np.minimum(1.0, np.sum(x * x, axis=1) / 4.0),
        dim, _BARRIER_BOX, spacing, constant_tail(1.0),
    )


def exterior_barrier_field(dim: int, C: float, alpha_b: float, spacing: float = _BARRIER_SPACING) -> GridField:
    """phi(x) = min(1, C (|x| - 1)_+^alpha)."""
    if not (C > 0 and alpha_b > 0):
        raise InvalidParameterError("exterior barrier needs C > 0 and alpha_b > 0")

    def phi(x):
        r = np.sqrt(np.sum(x * x, axis=1))
        return np.minimum(1.0, C * np.maximum(r - 1.0, 0.0) ** alpha_b)

    tail = constant_tail(1.0) if C * (_BARRIER_BOX - 1.0) ** alpha_b >= 1.0 else None
    return GridField.from_function(phi, dim, _BARRIER_BOX, spacing, tail)


def _ball_samples(dim: int) -> np.ndarray:
    if dim == 1:
        return (-1.0 + np.arange(1, 16) / 8.0).reshape(-1, 1)
    axis = np.arange(-1.0, 1.0 + 1e-12, 0.25)
    pts = np.array([(a, b) for a in axis for b in axis])
    return pts[np.sum(pts * pts, axis=1) < 1.0 - 1e-12]


def _shell_samples(dim: int, radii) -> np.ndarray:
    radii = np.asarray(radii, dtype=float)
    if dim == 1:
        return np.concatenate([radii, -radii]).reshape(-1, 1)
    th = 2.0 * math.pi * np.arange(8) / 8
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    return (radii[:, None, None] * dirs[None]).reshape(-1, 2)


@dataclass
class InteriorBarrierReport:
    s_star: float | None
    delta_star: float | None
    minima: dict[float, float]
    hypotheses_ok: bool

    @property
    def ok(self) -> bool:
        return self.s_star is not None


def barrier_interior(params: EllipticityParams, s_grid=None, q: QuadratureConfig | None = None,
                     spacing: float = _BARRIER_SPACING) -> InteriorBarrierReport:
    """
    Largest s in s_grid with min over B_1 samples of M^-_{L0} phi_s > 0,
    phi_s(x) = phi(s x).
    """
    hyp = check_hypotheses(params)
    if not hyp.ok:
        logger.warning("[barrier] hypotheses fail (%s); expecting the failure path", ", ".join(hyp.failures()))
    s_grid = [2.0**-k for k in range(11)] if s_grid is None else list(s_grid)
    if any(not 0.0 < s <= 1.0 for s in s_grid):
        raise InvalidParameterError("s_grid values must lie in (0, 1]")
    q = (q or QuadratureConfig()).monotone()
    phi = interior_barrier_field(params.dim, spacing)
    samples = _ball_samples(params.dim)
    op = ExtremalOperator(params, "-", with_drift=True)

    minima: dict[float, float] = {}
    for s in sorted(set(s_grid), reverse=True):
        batch = evaluate(op, rescale(phi, 1.0, s), samples, q)
        minima[s] = float(np.min(batch.value))
        if minima[s] > 0.0:
            logger.info("[barrier] interior: s*=%g, delta*=%.4g", s, minima[s])
            return InteriorBarrierReport(s, minima[s], minima, hyp.ok)
    logger.warning("[barrier] interior barrier failed for every s; minima=%s", minima)
    return InteriorBarrierReport(None, None, minima, hyp.ok)


@dataclass
class ExteriorBarrierReport:
    C: float
    alpha_b: float
    ring_max: float
    exterior_max: float
    exterior_tolerance: float
    passed: bool


def barrier_exterior(params: EllipticityParams, C: float, alpha_b: float, q: QuadratureConfig | None = None,
                     spacing: float = _BARRIER_SPACING) -> ExteriorBarrierReport:
    """
    M^+_{L0} phi on samples of B_2 minus B_1 (must be < 0) and of
    |x| in [2, 2.5] (must be <= tolerance).
    """
    q = (q or QuadratureConfig()).monotone()
    phi = exterior_barrier_field(params.dim, C, alpha_b, spacing)
    op = ExtremalOperator(params, "+", with_drift=True)
    ring = evaluate(op, phi, _shell_samples(params.dim, 1.0 + np.arange(1, 8) / 8.0), q)
    far = evaluate(op, phi, _shell_samples(params.dim, [2.0, 2.25, 2.5]), q)
    ring_max = float(np.max(ring.value))
    far_max = float(np.max(far.value))
    far_tol = float(np.max(far.tolerance))
    passed = ring_max < 0.0 and far_max <= far_tol
    logger.debug("[barrier] exterior C=%g alpha=%g: ring max %.4g, far max %.4g", C, alpha_b, ring_max, far_max)
    return ExteriorBarrierReport(C, alpha_b, ring_max, far_max, far_tol, passed)


def search_exterior_barrier(params: EllipticityParams, q: QuadratureConfig | None = None,
                            C_grid=(1.0, 4.0, 16.0, 64.0),
                            alpha_fractions=(0.125, 0.25, 0.375)) -> ExteriorBarrierReport | None:
    """First verified (C, alpha_b = fraction * sigma) pair, or None."""
    for C in C_grid:
        for frac in alpha_fractions:
            rep = barrier_exterior(params, C, frac * params.sigma, q)
            if rep.passed:
                logger.info("[barrier] exterior: verified C=%g alpha_b=%g", C, rep.alpha_b)
                return rep
    logger.warning("[barrier] exterior: no (C, alpha_b) pair verified for sigma=%g", params.sigma)
    return None


@dataclass
class BoundaryBarrierReport:
    x: tuple[float, ...]
    delta: float
    r: float
    dominates: bool
    worst_gap: float
    touches: bool
    supersolution_max: float | None

    @property
    def passed(self) -> bool:
        ok = self.dominates and self.touches
        return ok and (self.supersolution_max is None or self.supersolution_max <= 0.0)


def boundary_barrier_check(g: GridField, x, eps: float, C: float, alpha_b: float,
                           domain: Domain | None = None, eta=None,
                           params: EllipticityParams | None = None,
                           q: QuadratureConfig | None = None) -> BoundaryBarrierReport:
    """
    Build w(y) = 2||g|| phi((y - (x + r eta)) / r) + g(x) + eps at a boundary
    point x, with delta from the continuity modulus of g at x and r = delta / 4,
    and check w >= g on the exterior nodes and w(x) = g(x) + eps. With params,
    also report max M^+_{L0} w at three points of Omega along -eta.
    """
    if not eps > 0:
        raise InvalidParameterError("eps must be positive")
    domain = domain or Domain()
    xv = as_points(x, g.dim)[0]
    eta = domain.outward_normal(xv) if eta is None else np.asarray(eta, dtype=float).ravel()
    norm_g = g.sup_norm()
    gx = float(g.evaluate(xv)[0])

    nodes = g.nodes
    exterior = ~domain.contains(nodes)
    ext_nodes, ext_vals = nodes[exterior], g.flat_values[exterior]
    dist = np.sqrt(np.sum((ext_nodes - xv) ** 2, axis=1))
    delta = None
    for k in range(0, 12):
        d = 2.0**-k
        near = dist <= d
        if not near.any() or np.max(np.abs(ext_vals[near] - gx)) <= eps:
            delta = d
            break
    if delta is None:
        raise PreconditionError(f"g is not eps-continuous at {xv.tolist()} down to the grid scale", [xv.tolist()])
    r = delta / 4.0
    z = xv + r * eta

    def phi(p):
        rad = np.sqrt(np.sum(p * p, axis=1))
        return np.minimum(1.0, C * np.maximum(rad - 1.0, 0.0) ** alpha_b)

    def w(y):
        return 2.0 * norm_g * phi((y - z) / r) + gx + eps

    gaps = w(ext_nodes) - ext_vals
    worst = float(np.min(gaps))
    touches = abs(float(w(xv[None, :])[0]) - (gx + eps)) <= 1e-12 * max(1.0, abs(gx) + eps)

    sup_max = None
    if params is not None:
        unit = exterior_barrier_field(g.dim, C, alpha_b)
        scaled = rescale(unit, 2.0 * norm_g, 1.0 / r)
        shifted = scaled.with_values(scaled.values + gx + eps).with_tail(
            constant_tail(2.0 * norm_g + gx + eps)
        )
        inside_pts = np.array([-t * r * eta for t in (1.25, 1.5, 1.75)])
        batch = evaluate(ExtremalOperator(params, "+", with_drift=True), shifted, inside_pts,
                         (q or QuadratureConfig()).monotone())
        sup_max = float(np.max(batch.value))

    return BoundaryBarrierReport(
        x=tuple(float(c) for c in xv),
        delta=delta,
        r=r,
        dominates=worst >= -1e-12,
        worst_gap=worst,
        touches=touches,
        supersolution_max=sup_max,
    )
