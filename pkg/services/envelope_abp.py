"""
Convex envelope of min(u, 0) on B_3 and the ABP machinery built on it.

- convex_envelope: lower hull of the graph points (monotone chain in 1D,
  scipy ConvexHull in 2D), supporting-plane subgradients, contact set
- interpolation_radius, dyadic_rings, half_annulus_fraction: closed forms
- ring_opening_test: measured super-level fractions on dyadic rings at a
  contact point
- abp_cover: cube tiling of the contact set, split until the good-measure and
  gradient-image criteria hold or the grid stops resolving the cube
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from config import ABP_C0, ABP_CONSTANT, ABP_RHO0
from services.errors import InvalidParameterError, PreconditionError, ResolutionError
from services.gridfield import GridField, as_points, constant_tail
from services.params_kernels import EllipticityParams, check_hypotheses, check_smallness

logger = logging.getLogger(__name__)

SUPPORT_RADIUS = 3.0
_PLANE_CHUNK = 2048
_CONTACT_FLOOR = 1e-12


def default_rho0(dim: int) -> float:
    return ABP_RHO0 if ABP_RHO0 > 0 else 1.0 / (128.0 * math.sqrt(dim))


# ---- Envelope ----


@dataclass(frozen=True, eq=False)
class EnvelopeResult:
    gamma: GridField
    subgradient: np.ndarray  # (N, n), node order of gamma
    contact_mask: np.ndarray  # (N,)
    contact_tol: float
    source: GridField  # u on the same grid as gamma
    planes: np.ndarray  # (P, n + 1): gamma = max_p a_p . x + c_p inside B_3
    support_radius: float = SUPPORT_RADIUS

    @property
    def nodes(self) -> np.ndarray:
        return self.gamma.nodes

    @property
    def contact_nodes(self) -> np.ndarray:
        return self.gamma.nodes[self.contact_mask]

    def node_index(self, x) -> int:
        """Index of the grid node at x (nearest node; x must sit on the grid)."""
        x = as_points(x, self.gamma.dim)[0]
        h, r = self.gamma.spacing, self.gamma.box_radius
        idx = np.rint((x + r) / h).astype(np.int64)
        if np.any(np.abs(idx * h - r - x) > 1e-9) or np.any(idx < 0) or np.any(idx > self.gamma.cells):
            raise PreconditionError(f"{x.tolist()} is not a node of the envelope grid", [x.tolist()])
        return int(np.ravel_multi_index(tuple(idx), self.gamma.values.shape))

    def evaluate(self, points) -> np.ndarray:
        """Gamma at arbitrary points: max of the hull planes in B_3, 0 outside."""
        pts = as_points(points, self.gamma.dim)
        out = np.zeros(len(pts))
        if len(self.planes) == 0:
            return out
        inside = np.sqrt(np.sum(pts**2, axis=1)) <= self.support_radius + 1e-12
        vals, _ = _max_plane(self.planes, pts[inside])
        out[inside] = np.minimum(vals, 0.0)
        return out


def _support_grid(u: GridField) -> GridField:
    half = math.ceil(SUPPORT_RADIUS / u.spacing - 1e-9)
    h = SUPPORT_RADIUS / half
    support = GridField(u.dim, SUPPORT_RADIUS, h, np.zeros((2 * half + 1,) * u.dim), u.tail)
    return support.with_values(u.evaluate(support.nodes).reshape(support.values.shape))


def _check_nonnegative_outside_b1(u: GridField, support: GridField):
    pts = np.concatenate([support.nodes, u.tail_sample_points()]) if u.tail.kind != "clamp" else support.nodes
    vals = u.evaluate(pts)
    bad = (np.sqrt(np.sum(pts**2, axis=1)) > 1.0 + 1e-12) & (vals < -_CONTACT_FLOOR)
    if bad.any():
        where = pts[bad]
        raise PreconditionError(
            f"u < 0 at {len(where)} point(s) outside B_1, e.g. {where[0].tolist()}",
            [p.tolist() for p in where[:20]],
        )


def _default_contact_tol(values: np.ndarray) -> float:
    """4 x the largest second difference over stencils that lie in {u < 0}."""
    v = np.minimum(values, 0.0)
    worst = 0.0
    for axis in range(v.ndim):
        lo = [slice(None)] * v.ndim
        mid = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[axis], mid[axis], hi[axis] = slice(None, -2), slice(1, -1), slice(2, None)
        a, b, c = v[tuple(lo)], v[tuple(mid)], v[tuple(hi)]
        neg = (a < 0) & (b < 0) & (c < 0)
        if neg.any():
            worst = max(worst, float(np.max(np.abs(a + c - 2.0 * b)[neg])))
    return max(4.0 * worst, _CONTACT_FLOOR)


def _lower_hull_1d(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Indices of the lower convex hull of (x, v); x ascending."""
    hull: list[int] = []
    for i in range(len(x)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (v[i] - v[a]) - (v[b] - v[a]) * (x[i] - x[a])
            if cross <= 0.0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull, dtype=np.int64)


def _planes_1d(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    hull = _lower_hull_1d(x, v)
    xh, vh = x[hull], v[hull]
    slopes = np.diff(vh) / np.diff(xh)
    intercepts = vh[:-1] - slopes * xh[:-1]
    return np.column_stack([slopes, intercepts])


def _planes_2d(xy: np.ndarray, v: np.ndarray) -> np.ndarray:
    hull = ConvexHull(np.column_stack([xy, v]))
    eq = hull.equations
    lower = eq[eq[:, 2] < -1e-9]
    a = -lower[:, :2] / lower[:, 2:3]
    c = -lower[:, 3] / lower[:, 2]
    planes = np.column_stack([a, c])
    return np.unique(np.round(planes, 12), axis=0)


def _max_plane(planes: np.ndarray, pts: np.ndarray):
    """(max_p a_p . x + c_p, argmax) over rows of pts, chunked."""
    vals = np.empty(len(pts))
    arg = np.empty(len(pts), dtype=np.int64)
    a, c = planes[:, :-1], planes[:, -1]
    for start in range(0, len(pts), _PLANE_CHUNK):
        block = pts[start:start + _PLANE_CHUNK] @ a.T + c[None, :]
        arg[start:start + _PLANE_CHUNK] = np.argmax(block, axis=1)
        vals[start:start + _PLANE_CHUNK] = np.max(block, axis=1)
    return vals, arg


def convex_envelope(u: GridField, contact_tol: float | None = None,
                    check_support: bool = True) -> EnvelopeResult:
    """
    Largest convex function below min(u, 0) on B_3 (zero outside B_3).

    The grid is [-3, 3]^n at (about) the spacing of u; u is resampled onto it
    and its tail covers the part of B_3 outside u's box.
    """
    support = _support_grid(u)
    if check_support:
        _check_nonnegative_outside_b1(u, support)

    nodes = support.nodes
    values = support.flat_values
    n = u.dim
    in_ball = np.sqrt(np.sum(nodes**2, axis=1)) <= SUPPORT_RADIUS + 1e-12
    v = np.minimum(values, 0.0)
    tol = contact_tol if contact_tol is not None else _default_contact_tol(support.values)

    gamma = np.zeros(len(nodes))
    subgrad = np.zeros((len(nodes), n))
    if not np.any(v[in_ball] < 0.0):
        planes = np.zeros((0, n + 1))
    else:
        if n == 1:
            planes = _planes_1d(nodes[in_ball, 0], v[in_ball])
        else:
            planes = _planes_2d(nodes[in_ball], v[in_ball])
        vals, arg = _max_plane(planes, nodes[in_ball])
        gamma[in_ball] = np.minimum(vals, 0.0)
        subgrad[in_ball] = planes[arg, :-1]
        logger.debug("[abp] envelope: %d planes over %d nodes", len(planes), int(in_ball.sum()))

    contact = in_ball & (np.abs(values - gamma) <= tol)
    gamma_field = GridField(n, SUPPORT_RADIUS, support.spacing, gamma, constant_tail(0.0))
    return EnvelopeResult(
        gamma=gamma_field,
        subgradient=subgrad,
        contact_mask=contact,
        contact_tol=tol,
        source=support,
        planes=planes,
    )


def convexity_defect(env: EnvelopeResult) -> float:
    """min over nodes with x +- e in B_3 of delta_e(gamma, x; e), e the grid unit offsets."""
    g = env.gamma.values
    worst = math.inf
    r = env.support_radius + 1e-12
    nodes = env.gamma.nodes.reshape(g.shape + (g.ndim,))
    h = env.gamma.spacing
    for e in itertools.product((-1, 0, 1), repeat=g.ndim):
        if all(k <= 0 for k in e):
            continue
        e = np.array(e)
        pad = 1
        core = tuple(slice(pad, -pad) for _ in range(g.ndim))
        plus = tuple(slice(pad + k, g.shape[i] - pad + k) for i, k in enumerate(e))
        minus = tuple(slice(pad - k, g.shape[i] - pad - k) for i, k in enumerate(e))
        d = g[plus] + g[minus] - 2.0 * g[core]
        x = nodes[core]
        ok = (np.linalg.norm(x + h * e, axis=-1) <= r) & (np.linalg.norm(x - h * e, axis=-1) <= r)
        if ok.any():
            worst = min(worst, float(np.min(d[ok])))
    return 0.0 if worst == math.inf else worst


def supporting_plane_defect(env: EnvelopeResult) -> float:
    """Largest violation of gamma(z) >= gamma(x) + p(x).(z - x) over B_3 nodes."""
    nodes = env.gamma.nodes
    in_ball = np.sqrt(np.sum(nodes**2, axis=1)) <= env.support_radius + 1e-12
    z, gz = nodes[in_ball], env.gamma.flat_values[in_ball]
    worst = 0.0
    for x, gx, p in zip(z, gz, env.subgradient[in_ball]):
        worst = max(worst, float(np.max(gx + (z - x) @ p - gz)))
    return worst


def brute_force_envelope_1d(u: GridField) -> np.ndarray:
    """
    Envelope values on the 1D support grid as the sup over affine minorants
    of min(u, 0) through pairs of nodes.
    """
    if u.dim != 1:
        raise InvalidParameterError("brute force envelope is 1D only")
    support = _support_grid(u)
    x = support.nodes[:, 0]
    v = np.minimum(support.flat_values, 0.0)
    i, j = np.triu_indices(len(x), k=1)
    slope = (v[j] - v[i]) / (x[j] - x[i])
    icpt = v[i] - slope * x[i]
    lines = slope[:, None] * x[None, :] + icpt[:, None]
    minorant = np.all(lines <= v[None, :] + 1e-12, axis=1)
    best = np.max(lines[minorant], axis=0) if minorant.any() else np.full(len(x), -np.inf)
    return np.minimum(best, 0.0)


@dataclass(frozen=True)
class GradientBoundReport:
    max_gradient: float
    bound: float
    ok: bool


def gradient_bound_check(env: EnvelopeResult, u: GridField | None = None) -> GradientBoundReport:
    """|grad Gamma| <= ||u^-|| / 2 on B_1; 2D allows a (1 + 2h) slack for the polygonal rim."""
    source = env.source if u is None else u
    u_minus = float(np.max(np.maximum(-source.flat_values, 0.0)))
    nodes = env.gamma.nodes
    in_b1 = np.sqrt(np.sum(nodes**2, axis=1)) <= 1.0 + 1e-12
    grads = np.sqrt(np.sum(env.subgradient[in_b1] ** 2, axis=1))
    max_grad = float(np.max(grads)) if grads.size else 0.0
    slack = 1.0 if env.gamma.dim == 1 else 1.0 + 2.0 * env.gamma.spacing
    bound = 0.5 * u_minus * slack
    return GradientBoundReport(max_grad, bound, max_grad <= bound + 1e-12)


# ---- Closed forms ----


def interpolation_radius(params: EllipticityParams, alpha: float) -> float:
    """((1 - alpha) lambda (2 - sigma) / (b (1 - tau)))^{1/(sigma - tau)}; inf when b = 0."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if params.b == 0.0:
        return math.inf
    p = params
    base = (1.0 - alpha) * p.lambda_lo * (2.0 - p.sigma) / (p.b * (1.0 - p.tau))
    return base ** (1.0 / (p.sigma - p.tau))


@dataclass(frozen=True)
class DyadicRing:
    k: int
    outer: float
    inner: float


def dyadic_rings(sigma: float, rho0: float, k_max: int) -> list[DyadicRing]:
    """r_k = rho0 2^{-1/(2 - sigma) - k}; ring k is B_{r_k} minus B_{r_{k+1}}."""
    if k_max < 1:
        raise InvalidParameterError("k_max must be >= 1")
    if not (0.0 < sigma < 2.0 and rho0 > 0):
        raise InvalidParameterError("need 0 < sigma < 2 and rho0 > 0")
    r0 = rho0 * 2.0 ** (-1.0 / (2.0 - sigma))
    return [DyadicRing(k, r0 * 2.0**-k, r0 * 2.0 ** -(k + 1)) for k in range(k_max + 1)]


def half_annulus_fraction(dim: int) -> tuple[float, float]:
    """
    (eps0, mu) with eps0 = |A| / (2 |B_1 \\ B_1/2|), A = (B_1 \\ B_1/2) n {x_1 > 1/2},
    and mu = 1 - eps0.
    """
    if dim == 1:
        annulus, cap = 1.0, 0.5
    elif dim == 2:
        annulus = 0.75 * math.pi
        cap = math.pi / 3.0 - math.sqrt(3.0) / 4.0
    else:
        raise InvalidParameterError(f"dim must be 1 or 2, got {dim}")
    eps0 = cap / (2.0 * annulus)
    return eps0, 1.0 - eps0


# ---- Ring opening ----


@dataclass(frozen=True)
class RingOpeningReport:
    k_found: int | None
    fractions: dict[int, float]
    bound: float
    F: float
    radii: dict[int, float]

    @property
    def ok(self) -> bool:
        return self.k_found is not None


def _ring_offsets(dim: int, h: float, inner: float, outer: float) -> np.ndarray:
    p = int(math.ceil(outer / h))
    rng = np.arange(-p, p + 1)
    grids = np.meshgrid(*([rng] * dim), indexing="ij")
    k = np.stack([g.ravel() for g in grids], axis=1) * h
    r = np.sqrt(np.sum(k**2, axis=1))
    return k[(r >= inner - 1e-12) & (r < outer - 1e-12)]


def ring_opening_test(u: GridField, env: EnvelopeResult, x, M: float, params: EllipticityParams,
                      f_at_x: float, rho0: float | None = None, k_max: int = 12,
                      C0: float = ABP_C0) -> RingOpeningReport:
    """
    Scan the dyadic rings at a contact point x for the first k with
    |{y in R_k : u(x+y) > u(x) + y.grad Gamma(x) + M r_k^2}| <= C0 (F/M) |R_k|,
    F = f(x) + b ||u||.
    """
    if not M > 0:
        raise InvalidParameterError(f"M must be positive, got {M}")
    idx = env.node_index(x)
    if not env.contact_mask[idx]:
        raise PreconditionError(f"{np.ravel(x).tolist()} is not in the contact set", [np.ravel(x).tolist()])
    xv = env.nodes[idx]
    grad = env.subgradient[idx]
    h = env.gamma.spacing
    rho0 = default_rho0(u.dim) if rho0 is None else rho0

    F = f_at_x + params.b * u.sup_norm()
    bound = C0 * F / M
    ux = float(u.evaluate(xv)[0])
    fractions, radii = {}, {}
    found = None
    for ring in dyadic_rings(params.sigma, rho0, k_max):
        if ring.outer < 2.0 * h:
            continue
        ys = _ring_offsets(u.dim, h, ring.inner, ring.outer)
        if len(ys) == 0:
            continue
        above = u.evaluate(xv + ys) > ux + ys @ grad + M * ring.outer**2
        fractions[ring.k] = float(np.mean(above))
        radii[ring.k] = ring.outer
        if found is None and fractions[ring.k] <= bound:
            found = ring.k
    if not fractions:
        raise ResolutionError(
            f"no dyadic ring resolved: r_0={rho0 * 2.0 ** (-1.0 / (2.0 - params.sigma)):.3g} < 2h={2 * h:.3g}"
        )
    return RingOpeningReport(found, fractions, bound, F, radii)


# ---- Cube cover ----


@dataclass(frozen=True)
class CubeStats:
    center: tuple[float, ...]
    side: float
    depth: int
    contact_count: int
    max_F: float
    gradient_measure: float
    good_fraction: float
    good_fraction_small: float
    resolved: bool

    @property
    def diameter(self) -> float:
        return self.side * math.sqrt(len(self.center))


@dataclass
class CubeCover:
    cubes: list[CubeStats] = field(default_factory=list)
    gradient_measure_sum: float = 0.0
    max_u_minus: float = 0.0
    ratio: float | None = None
    rho0: float = 0.0
    d0: float = 0.0
    mu: float = 0.0
    dilation: float = 0.0

    @property
    def unresolved(self) -> int:
        return sum(1 for c in self.cubes if not c.resolved)


def _in_cube(pts: np.ndarray, center: np.ndarray, side: float) -> np.ndarray:
    return np.all(np.abs(pts - center) <= 0.5 * side + 1e-12, axis=1)


def abp_cover(u: GridField, env: EnvelopeResult, f: GridField | float, params: EllipticityParams,
              rho0: float | None = None, dilation: float | None = None, mu: float | None = None,
              C: float = ABP_CONSTANT, max_depth: int = 12) -> CubeCover:
    """
    Tile B_1 with cubes of diameter d0 = rho0 2^{-1/(2-sigma)}, keep those
    whose closure meets the strict contact set {u = Gamma < 0}, and split a
    cube into 2^n halves until

      (ii)  |{y in dilation*Q : u(y) <= Gamma(y) + C max_Q F d^2}| >= mu |Q|
      (iii) |grad Gamma(Q)| <= C (max_Q F)^n |Q|

    hold. Cubes below two grid cells are flagged unresolved and kept.
    """
    hyp = check_hypotheses(params)
    small = check_smallness(params)
    if not hyp.h1.passed or not small.passed:
        failed = [c.name for c in (hyp.h1, small) if not c.passed]
        raise PreconditionError(f"abp_cover needs H1 and the smallness condition; failed: {failed}")

    n = u.dim
    rho0 = default_rho0(n) if rho0 is None else rho0
    dilation = 32.0 * math.sqrt(n) if dilation is None else dilation
    small_dilation = 8.0 * math.sqrt(n)
    mu = half_annulus_fraction(n)[1] if mu is None else mu
    h = env.gamma.spacing
    d0 = rho0 * 2.0 ** (-1.0 / (2.0 - params.sigma))
    side0 = d0 / math.sqrt(n)

    nodes = env.nodes
    gamma = env.gamma.flat_values
    uvals = env.source.flat_values
    in_b1 = np.sqrt(np.sum(nodes**2, axis=1)) <= 1.0 + 1e-12
    strict = env.contact_mask & in_b1 & (gamma < -env.contact_tol)
    contact_pts = nodes[strict]
    f_vals = f.evaluate(contact_pts) if isinstance(f, GridField) else np.full(len(contact_pts), float(f))
    F_contact = f_vals + params.b * u.sup_norm()
    u_minus = float(np.max(np.maximum(-uvals, 0.0)))

    cover = CubeCover(max_u_minus=u_minus, rho0=rho0, d0=d0, mu=mu, dilation=dilation)
    if len(contact_pts) == 0:
        cover.ratio = None if u_minus > 0 else 0.0
        logger.info("[abp] empty contact set in B_1; cover is empty")
        return cover

    def good_measure(center, side, factor, threshold):
        sel = _in_cube(nodes, center, factor * side)
        good = uvals[sel] <= gamma[sel] + threshold
        return float(np.count_nonzero(good)) * h**n

    def visit(center: np.ndarray, side: float, depth: int):
        mask = _in_cube(contact_pts, center, side)
        if not mask.any():
            return
        max_F = float(np.max(F_contact[mask]))
        volume = side**n
        d = side * math.sqrt(n)
        in_q = _in_cube(nodes, center, side)
        grads = env.subgradient[in_q]
        grad_measure = float(np.prod(grads.max(axis=0) - grads.min(axis=0))) if len(grads) else 0.0
        threshold = C * max_F * d * d
        good = good_measure(center, side, dilation, threshold)
        good_small = good_measure(center, side, small_dilation, threshold)
        crit_ii = good >= mu * volume
        crit_iii = grad_measure <= C * max_F**n * volume + 1e-15
        resolved = side >= 2.0 * h
        if (crit_ii and crit_iii) or not resolved or depth >= max_depth:
            cover.cubes.append(CubeStats(
                center=tuple(float(c) for c in center),
                side=side,
                depth=depth,
                contact_count=int(mask.sum()),
                max_F=max_F,
                gradient_measure=grad_measure,
                good_fraction=good / volume,
                good_fraction_small=good_small / volume,
                resolved=resolved and crit_ii and crit_iii,
            ))
            return
        for bits in itertools.product((-1.0, 1.0), repeat=n):
            visit(center + 0.25 * side * np.array(bits), 0.5 * side, depth + 1)

    # Only tiles whose closure holds a contact node are visited.
    count = math.ceil(2.0 / side0)
    edge = -0.5 * count * side0
    tiles = set()
    for shift in (-1e-12, 1e-12):
        cells = np.floor((contact_pts - edge + shift) / side0).astype(np.int64)
        tiles.update(map(tuple, np.clip(cells, 0, count - 1)))
    for idx in sorted(tiles):
        visit(edge + side0 * (np.array(idx, dtype=float) + 0.5), side0, 0)

    cover.gradient_measure_sum = float(sum(c.gradient_measure for c in cover.cubes))
    if cover.gradient_measure_sum > 0:
        cover.ratio = u_minus / cover.gradient_measure_sum ** (1.0 / n)
    logger.info(
        "[abp] cover: %d cubes (%d unresolved), sum |grad Gamma(Q)|=%.4g, max u^-=%.4g",
        len(cover.cubes), cover.unresolved, cover.gradient_measure_sum, u_minus,
    )
    return cover
