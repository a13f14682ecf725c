"""
Singular quadrature for the nonlocal operators.

Every operator here is evaluated through the symmetrized differences
delta_e = u(x+y) + u(x-y) - 2u(x) and delta_o = u(x+y) - u(x-y):

- B_{r_inner}: quadratic model of u fitted on the 3^n stencil at x
- r_inner <= |y| <= r_outer: log-spaced rings, midpoint (or Gauss) per ring
- |y| > r_outer: exact when the tail is constant and far enough, otherwise a
  rigorous bound from ||u|| and the class bounds

Sampling of u is linear in the node values (GridField.sampling_operator), so the
Dirichlet solver reuses `DifferenceSampler` and the reducers below on every
iteration without re-interpolating. Evaluation samples off-node points with
cubic weights by default; the solver asks for the multilinear ones.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from config import ANGULAR_POINTS, QUADRATURE_INTERPOLATION, RADIAL_ORDER, RINGS_PER_DECADE
from services.errors import InvalidFamilyError, InvalidParameterError, ResolutionError
from services.gridfield import INTERPOLATIONS, GridField, as_points, rescale
from services.params_kernels import (
    EllipticityParams,
    KernelSpec,
    abs_first_moment,
    sphere_area,
)

logger = logging.getLogger(__name__)

# Points per chunk for one-shot evaluation (rows = points x quadrature nodes).
_CHUNK = 256
# Angles used for the inner extremal integral in 2D.
_INNER_ANGLES = 720


def _sign_of(sign) -> int:
    if sign in ("+", 1, "plus"):
        return 1
    if sign in ("-", -1, "minus"):
        return -1
    raise InvalidParameterError(f"sign must be '+' or '-', got {sign!r}")


# ---- Quadrature ----


@dataclass(frozen=True)
class QuadratureConfig:
    """Radii default to r_inner = 2h and r_outer = 4R of the field evaluated."""

    r_inner: float | None = None
    r_outer: float | None = None
    rings_per_decade: int = RINGS_PER_DECADE
    angular_points: int = ANGULAR_POINTS
    taylor_inner: bool = True
    radial_order: int = RADIAL_ORDER
    interpolation: str = QUADRATURE_INTERPOLATION

    def __post_init__(self):
        if self.interpolation not in INTERPOLATIONS:
            raise InvalidParameterError(f"interpolation must be one of {INTERPOLATIONS}")
        if self.rings_per_decade < 4:
            raise InvalidParameterError("rings_per_decade must be >= 4")
        if self.angular_points < 2:
            raise InvalidParameterError("angular_points must be >= 2")
        if self.radial_order < 1:
            raise InvalidParameterError("radial_order must be >= 1")
        for name in ("r_inner", "r_outer"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise InvalidParameterError(f"{name} must be positive, got {v}")

    @classmethod
    def from_overrides(cls, overrides: dict | None) -> "QuadratureConfig":
        return cls(**(overrides or {}))

    def refined(self) -> "QuadratureConfig":
        return replace(self, rings_per_decade=2 * self.rings_per_decade)

    def radii_for(self, u: GridField) -> tuple[float, float]:
        r_in = self.r_inner if self.r_inner is not None else 2.0 * u.spacing
        r_out = self.r_outer if self.r_outer is not None else 4.0 * u.box_radius
        if not r_in < r_out:
            raise InvalidParameterError(f"need r_inner < r_outer, got {r_in} >= {r_out}")
        if r_out < u.box_radius:
            raise InvalidParameterError(
                f"r_outer={r_out} is smaller than the box radius {u.box_radius}"
            )
        if not self.taylor_inner and r_in < 0.5 * u.spacing:
            raise ResolutionError(
                f"r_inner={r_in} is below the grid resolution h/2={0.5 * u.spacing}"
            )
        return r_in, r_out

    def resolve(self, u: GridField) -> "QuadratureNodes":
        r_in, r_out = self.radii_for(u)
        return build_nodes(
            u.dim, r_in, r_out, self.rings_per_decade, self.angular_points,
            self.radial_order, self.taylor_inner, u.spacing, self.interpolation,
        )

    def monotone(self) -> "QuadratureConfig":
        """Same rule sampling u multilinearly, so every sample weight is nonnegative."""
        return replace(self, interpolation="linear")


@dataclass(frozen=True, eq=False)
class QuadratureNodes:
    """
    Offsets y_q with weights w_q so that the integral of F over the annulus is
    approximately sum_q w_q F(y_q). Only one of each +-y pair is needed by the
    symmetrized integrands, but both halves are kept: the odd kernel part is
    integrated against delta_o over the full annulus.
    """

    dim: int
    offsets: np.ndarray
    radii: np.ndarray
    weights: np.ndarray
    coarse_weights: np.ndarray
    r_inner: float
    r_outer: float
    taylor_inner: bool
    stencil_h: float
    interpolation: str = "linear"

    @property
    def size(self) -> int:
        return len(self.radii)


@lru_cache(maxsize=64)
def build_nodes(dim, r_inner, r_outer, rings_per_decade, angular_points, radial_order,
                taylor_inner, stencil_h, interpolation="linear") -> QuadratureNodes:
    rings = max(2, math.ceil(rings_per_decade * math.log10(r_outer / r_inner)))
    rings += rings % 2
    edges = np.linspace(math.log(r_inner), math.log(r_outer), rings + 1)
    half = 0.5 * (edges[1] - edges[0])
    gx, gw = np.polynomial.legendre.leggauss(radial_order)
    t = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half * gx[None, :]
    dt = np.broadcast_to(half * gw, t.shape)
    ring_id = np.broadcast_to(np.arange(rings)[:, None], t.shape)
    t, dt, ring_id = t.ravel(), dt.ravel(), ring_id.ravel()
    r = np.exp(t)

    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
        dir_w = np.array([1.0, 1.0])
    else:
        th = 2.0 * math.pi * (np.arange(angular_points) + 0.5) / angular_points
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        dir_w = np.full(angular_points, 2.0 * math.pi / angular_points)

    offsets = (r[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    radii = np.repeat(r, len(dirs))
    weights = ((r**dim * dt)[:, None] * dir_w[None, :]).ravel()
    # Every other ring with doubled weight: a cruder rule on the same samples.
    coarse = np.where(np.repeat(ring_id, len(dirs)) % 2 == 0, 2.0 * weights, 0.0)

    for arr in (offsets, radii, weights, coarse):
        arr.setflags(write=False)
    return QuadratureNodes(
        dim, offsets, radii, weights, coarse, float(r_inner), float(r_outer),
        bool(taylor_inner), float(stencil_h), interpolation,
    )


def _stencil_offsets(dim: int, h: float) -> np.ndarray:
    if dim == 1:
        return np.array([[h], [-h]])
    return h * np.array(
        [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float
    )


def _stencil_derivatives(st: np.ndarray, uc: np.ndarray, h: float):
    """Central gradient and hessian from the values at _stencil_offsets(n, h)."""
    m, n = len(uc), 1 if st.shape[1] == 2 else 2
    grad = np.empty((m, n))
    hess = np.zeros((m, n, n))
    for i in range(n):
        a, b = st[:, 2 * i], st[:, 2 * i + 1]
        grad[:, i] = (a - b) / (2.0 * h)
        hess[:, i, i] = (a + b - 2.0 * uc) / (h * h)
    if n == 2:
        d12 = (st[:, 4] - st[:, 5] - st[:, 6] + st[:, 7]) / (4.0 * h * h)
        hess[:, 0, 1] = hess[:, 1, 0] = d12
    return grad, hess


# ---- Difference samples ----


@dataclass(frozen=True, eq=False)
class DifferenceSamples:
    even: np.ndarray  # (M, Q)
    odd: np.ndarray  # (M, Q)
    center: np.ndarray  # (M,)
    grad: np.ndarray  # (M, n)
    hess: np.ndarray  # (M, n, n)
    sup_norm: float
    outer_constant: np.ndarray  # (M,) tail constant, NaN where the far field is not exact


class DifferenceSampler:
    """Linear maps node values -> (delta_e, delta_o, stencil fit) at fixed points."""

    def __init__(self, u: GridField, points, nodes: QuadratureNodes):
        pts = as_points(points, u.dim)
        n = u.dim
        self.dim = n
        self.points = pts
        self.nodes = nodes
        m, q = len(pts), nodes.size
        self._shape = (m, q)

        plus = (pts[:, None, :] + nodes.offsets[None, :, :]).reshape(-1, n)
        minus = (pts[:, None, :] - nodes.offsets[None, :, :]).reshape(-1, n)
        how = nodes.interpolation
        self._plus = u.sampling_operator(plus, how)
        self._minus = u.sampling_operator(minus, how)
        self._center = u.sampling_operator(pts, how)
        # Cubic sampling pairs with a second stencil at 2h for fourth-order derivatives.
        self._levels = 2 if how == "cubic" else 1
        base = _stencil_offsets(n, nodes.stencil_h)
        stencil = np.concatenate([k * base for k in range(1, self._levels + 1)])
        self._stencil = u.sampling_operator((pts[:, None, :] + stencil[None, :, :]).reshape(-1, n), how)
        self._stencil_count = len(base)

        self.tail_sup = u.tail_sup()

        # Far field is exactly the tail constant once every x +- y leaves the box.
        reach = np.sqrt(np.sum(pts**2, axis=1)) + math.sqrt(n) * u.box_radius
        exact = np.full(m, np.nan)
        if u.tail.kind == "constant":
            exact[nodes.r_outer >= reach] = u.tail.constant
        self.outer_constant = exact

    @staticmethod
    def _apply(op, values):
        mat, offset = op
        return mat @ values + offset

    def samples(self, values: np.ndarray) -> DifferenceSamples:
        values = np.asarray(values, dtype=float).ravel()
        m, q = self._shape
        h = self.nodes.stencil_h
        up = self._apply(self._plus, values).reshape(m, q)
        um = self._apply(self._minus, values).reshape(m, q)
        uc = self._apply(self._center, values)
        st = self._apply(self._stencil, values).reshape(m, self._levels, self._stencil_count)

        grad, hess = _stencil_derivatives(st[:, 0], uc, h)
        if self._levels == 2:
            grad2, hess2 = _stencil_derivatives(st[:, 1], uc, 2.0 * h)
            grad = (4.0 * grad - grad2) / 3.0
            hess = (4.0 * hess - hess2) / 3.0

        sup = max(float(np.max(np.abs(values))) if values.size else 0.0, self.tail_sup)
        return DifferenceSamples(
            even=up + um - 2.0 * uc[:, None],
            odd=up - um,
            center=uc,
            grad=grad,
            hess=hess,
            sup_norm=sup,
            outer_constant=self.outer_constant,
        )


# ---- Results ----


@dataclass(frozen=True)
class OperatorValue:
    value: float
    even_contribution: float
    odd_contribution: float
    inner_estimate: float
    truncation_bound: float
    inner_error: float = 0.0
    quadrature_error: float = 0.0

    @property
    def tolerance(self) -> float:
        return self.inner_error + self.truncation_bound + self.quadrature_error


@dataclass(frozen=True, eq=False)
class OperatorBatch:
    even: np.ndarray
    odd: np.ndarray
    inner: np.ndarray
    inner_error: np.ndarray
    truncation: np.ndarray
    quadrature_error: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.even + self.odd

    @property
    def tolerance(self) -> np.ndarray:
        return self.inner_error + self.truncation + self.quadrature_error

    def __len__(self) -> int:
        return len(self.even)

    def at(self, i: int) -> OperatorValue:
        return OperatorValue(
            value=float(self.even[i] + self.odd[i]),
            even_contribution=float(self.even[i]),
            odd_contribution=float(self.odd[i]),
            inner_estimate=float(self.inner[i]),
            truncation_bound=float(self.truncation[i]),
            inner_error=float(self.inner_error[i]),
            quadrature_error=float(self.quadrature_error[i]),
        )

    def scaled(self, c: float) -> "OperatorBatch":
        """c * operator; error terms scale with |c|."""
        a = abs(c)
        return OperatorBatch(
            c * self.even, c * self.odd, c * self.inner,
            a * self.inner_error, a * self.truncation, a * self.quadrature_error,
        )

    @staticmethod
    def concat(parts: Sequence["OperatorBatch"]) -> "OperatorBatch":
        return OperatorBatch(*(np.concatenate([getattr(p, f) for p in parts]) for f in _BATCH_FIELDS))


_BATCH_FIELDS = ("even", "odd", "inner", "inner_error", "truncation", "quadrature_error")


def _ring_sums(integrand: np.ndarray, base: np.ndarray, nodes: QuadratureNodes):
    fine = integrand @ (nodes.weights * base)
    coarse = integrand @ (nodes.coarse_weights * base)
    return fine, np.abs(fine - coarse)


# ---- Operators ----


class NonlocalOperator:
    """Maps difference samples to operator values; `center_weight` bounds d(Iu)/du(x)."""

    dim: int

    def reduce(self, s: DifferenceSamples, nodes: QuadratureNodes) -> OperatorBatch:
        raise NotImplementedError

    def center_weight(self, nodes: QuadratureNodes) -> float:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


class LinearOperator(NonlocalOperator):
    """Lu = int delta_e K_e + int delta_o K_o."""

    def __init__(self, spec: KernelSpec):
        self.spec = spec
        self.dim = spec.dim

    def describe(self) -> str:
        return f"L[{self.spec.name}]"

    def reduce(self, s, nodes):
        spec, p = self.spec, self.spec.params
        n = self.dim
        ke, ko = spec.evaluate(nodes.offsets)
        ring_e, err_e = _ring_sums(s.even, ke, nodes)
        ring_o, err_o = _ring_sums(s.odd, ko, nodes)

        m2, m2_err = spec.second_moment(nodes.r_inner)
        m1, m1_err = spec.first_moment(nodes.r_inner)
        trace = np.trace(s.hess, axis1=1, axis2=2)
        gnorm = np.sqrt(np.sum(s.grad**2, axis=1))
        model_e = trace * m2
        model_o = 2.0 * s.grad @ m1
        model_err = np.abs(trace) * m2_err + 2.0 * gnorm * m1_err
        if nodes.taylor_inner:
            inner_e, inner_o, inner_err = model_e, model_o, model_err
        else:
            inner_e = inner_o = np.zeros(len(trace))
            inner_err = np.abs(model_e) + np.abs(model_o) + model_err

        mass, mass_err = spec.outer_mass(nodes.r_outer)
        exact = ~np.isnan(s.outer_constant)
        jump = np.where(exact, 2.0 * s.outer_constant - 2.0 * s.center, 0.0)
        outer_e = jump * mass
        odd_tail = (1.0 - p.tau) * p.b * sphere_area(n) * nodes.r_outer ** (-p.tau) / p.tau
        bound = 4.0 * s.sup_norm * (mass + mass_err) + 2.0 * s.sup_norm * odd_tail
        truncation = np.where(exact, np.abs(jump) * mass_err, bound)

        return OperatorBatch(
            even=ring_e + inner_e + outer_e,
            odd=ring_o + inner_o,
            inner=model_e + model_o,
            inner_error=inner_err,
            truncation=truncation,
            quadrature_error=err_e + err_o,
        )

    def center_weight(self, nodes):
        ke, _ = self.spec.evaluate(nodes.offsets)
        w = 2.0 * float(np.sum(nodes.weights * ke))
        if nodes.taylor_inner:
            m2, m2_err = self.spec.second_moment(nodes.r_inner)
            w += 2.0 * self.dim * (m2 + m2_err) / nodes.stencil_h**2
        mass, mass_err = self.spec.outer_mass(nodes.r_outer)
        return w + 2.0 * (mass + mass_err)


def _angular_extremal(hess: np.ndarray, hi: float, lo: float) -> np.ndarray:
    """Integral over the unit sphere of hi*(t.Dt)^+ - lo*(t.Dt)^-."""
    if hess.shape[1] == 1:
        d = hess[:, 0, 0]
        return 2.0 * (hi * np.maximum(d, 0.0) - lo * np.maximum(-d, 0.0))
    th = 2.0 * math.pi * (np.arange(_INNER_ANGLES) + 0.5) / _INNER_ANGLES
    c, sn = np.cos(th), np.sin(th)
    quad = (
        hess[:, 0, 0, None] * c**2
        + 2.0 * hess[:, 0, 1, None] * c * sn
        + hess[:, 1, 1, None] * sn**2
    )
    vals = hi * np.maximum(quad, 0.0) - lo * np.maximum(-quad, 0.0)
    return vals.sum(axis=1) * (2.0 * math.pi / _INNER_ANGLES)


class ExtremalOperator(NonlocalOperator):
    """
    M^{+-}_sigma, optionally with the drift term +- b|D_tau| (the L0 extremals).

    The even integrand Lambda*delta_e^+ - lambda*delta_e^- (roles swapped for
    the minus sign) is formed per quadrature node before summation.
    """

    def __init__(self, params: EllipticityParams, sign, with_drift: bool = False):
        self.params = params
        self.sign = _sign_of(sign)
        self.with_drift = with_drift
        self.dim = params.dim

    def describe(self) -> str:
        name = "M_L0" if self.with_drift else "M_sigma"
        return f"{name}{'+' if self.sign > 0 else '-'}"

    @property
    def _weights_pm(self) -> tuple[float, float]:
        p = self.params
        return (p.lambda_hi, p.lambda_lo) if self.sign > 0 else (p.lambda_lo, p.lambda_hi)

    def _even(self, s, nodes) -> OperatorBatch:
        p, n = self.params, self.dim
        hi, lo = self._weights_pm
        base = (2.0 - p.sigma) * nodes.radii ** (-n - p.sigma)
        integrand = hi * np.maximum(s.even, 0.0) - lo * np.maximum(-s.even, 0.0)
        ring, qerr = _ring_sums(integrand, base, nodes)

        model = nodes.r_inner ** (2.0 - p.sigma) * _angular_extremal(s.hess, hi, lo)
        inner = model if nodes.taylor_inner else np.zeros(len(model))
        inner_err = np.zeros(len(model)) if nodes.taylor_inner else np.abs(model)

        shell = (2.0 - p.sigma) * sphere_area(n) * nodes.r_outer ** (-p.sigma) / p.sigma
        exact = ~np.isnan(s.outer_constant)
        jump = np.where(exact, 2.0 * s.outer_constant - 2.0 * s.center, 0.0)
        outer = (hi * np.maximum(jump, 0.0) - lo * np.maximum(-jump, 0.0)) * shell
        bound = 4.0 * s.sup_norm * p.lambda_hi * shell
        truncation = np.where(exact, 0.0, bound)

        zeros = np.zeros(len(ring))
        return OperatorBatch(ring + inner + outer, zeros, model, inner_err, truncation, qerr)

    def reduce(self, s, nodes):
        even = self._even(s, nodes)
        if not self.with_drift or self.params.b == 0.0:
            return even
        drift = DTauOperator(self.params).reduce(s, nodes).scaled(self.sign * self.params.b)
        return OperatorBatch(
            even=even.even,
            odd=drift.odd,
            inner=even.inner + drift.inner,
            inner_error=even.inner_error + drift.inner_error,
            truncation=even.truncation + drift.truncation,
            quadrature_error=even.quadrature_error + drift.quadrature_error,
        )

    def center_weight(self, nodes):
        p, n = self.params, self.dim
        base = (2.0 - p.sigma) * nodes.radii ** (-n - p.sigma)
        w = 2.0 * p.lambda_hi * float(np.sum(nodes.weights * base))
        if nodes.taylor_inner:
            w += 2.0 * p.lambda_hi * sphere_area(n) * nodes.r_inner ** (2.0 - p.sigma) / nodes.stencil_h**2
        shell = (2.0 - p.sigma) * sphere_area(n) * nodes.r_outer ** (-p.sigma) / p.sigma
        return w + 2.0 * p.lambda_hi * shell


class DTauOperator(NonlocalOperator):
    """|D_tau|u = (1 - tau) int |delta_o| / |y|^{n+tau}; reported as an odd contribution."""

    def __init__(self, params: EllipticityParams):
        self.params = params
        self.dim = params.dim

    def describe(self) -> str:
        return "|D_tau|"

    def reduce(self, s, nodes):
        p, n = self.params, self.dim
        base = (1.0 - p.tau) * nodes.radii ** (-n - p.tau)
        ring, qerr = _ring_sums(np.abs(s.odd), base, nodes)

        gnorm = np.sqrt(np.sum(s.grad**2, axis=1))
        model = 2.0 * gnorm * abs_first_moment(n) * nodes.r_inner ** (1.0 - p.tau)
        inner = model if nodes.taylor_inner else np.zeros(len(model))
        inner_err = np.zeros(len(model)) if nodes.taylor_inner else model

        exact = ~np.isnan(s.outer_constant)
        bound = 2.0 * s.sup_norm * (1.0 - p.tau) * sphere_area(n) * nodes.r_outer ** (-p.tau) / p.tau
        truncation = np.where(exact, 0.0, bound)

        zeros = np.zeros(len(ring))
        return OperatorBatch(zeros, ring + inner, model, inner_err, truncation, qerr)

    def center_weight(self, nodes):
        return 0.0


KernelFamily = Sequence[Sequence[KernelSpec]]


class InfSupOperator(NonlocalOperator):
    """Iu = min over groups of max over members of the linear values."""

    def __init__(self, family: KernelFamily):
        groups = [list(g) for g in family]
        if not groups:
            raise InvalidFamilyError("kernel family is empty")
        for i, g in enumerate(groups):
            if not g:
                raise InvalidFamilyError(f"group {i} of the kernel family is empty")
        dims = {k.dim for g in groups for k in g}
        if len(dims) != 1:
            raise InvalidFamilyError(f"family mixes dimensions {sorted(dims)}")
        self.groups = groups
        self.members = [LinearOperator(k) for g in groups for k in g]
        self.dim = dims.pop()

    def describe(self) -> str:
        return f"inf-sup[{len(self.groups)}x{max(len(g) for g in self.groups)}]"

    def member_batches(self, s, nodes) -> list[OperatorBatch]:
        return [op.reduce(s, nodes) for op in self.members]

    def reduce(self, s, nodes):
        batches = self.member_batches(s, nodes)
        values = np.stack([b.value for b in batches])  # (members, M)
        m = values.shape[1]
        group_best = []
        start = 0
        for g in self.groups:
            block = values[start:start + len(g)]
            group_best.append(start + np.argmax(block, axis=0))
            start += len(g)
        group_best = np.stack(group_best)  # (groups, M)
        cols = np.arange(m)
        chosen = group_best[np.argmin(values[group_best, cols], axis=0), cols]

        def pick(name):
            return np.stack([getattr(b, name) for b in batches])[chosen, cols]

        def worst(name):
            return np.max(np.stack([getattr(b, name) for b in batches]), axis=0)

        return OperatorBatch(
            even=pick("even"),
            odd=pick("odd"),
            inner=pick("inner"),
            inner_error=worst("inner_error"),
            truncation=worst("truncation"),
            quadrature_error=worst("quadrature_error"),
        )

    def center_weight(self, nodes):
        return max(op.center_weight(nodes) for op in self.members)


# ---- Evaluation entry points ----


def _check_dim(op: NonlocalOperator, u: GridField):
    if op.dim != u.dim:
        raise InvalidParameterError(f"operator is {op.dim}-dimensional, field is {u.dim}-dimensional")


def evaluate(op: NonlocalOperator, u: GridField, points, q: QuadratureConfig | None = None) -> OperatorBatch:
    """Evaluate `op` at every row of `points`, in chunks."""
    _check_dim(op, u)
    q = q or QuadratureConfig()
    nodes = q.resolve(u)
    pts = as_points(points, u.dim)
    parts = []
    for start in range(0, len(pts), _CHUNK):
        sampler = DifferenceSampler(u, pts[start:start + _CHUNK], nodes)
        parts.append(op.reduce(sampler.samples(u.flat_values), nodes))
    if not parts:
        empty = np.zeros(0)
        return OperatorBatch(*(empty for _ in _BATCH_FIELDS))
    return OperatorBatch.concat(parts)


def eval_linear_batch(spec: KernelSpec, u: GridField, points, q=None) -> OperatorBatch:
    return evaluate(LinearOperator(spec), u, points, q)


def eval_linear(spec: KernelSpec, u: GridField, x, q=None) -> OperatorValue:
    return eval_linear_batch(spec, u, x, q).at(0)


def eval_extremal_even_batch(u, points, params, sign, q=None) -> OperatorBatch:
    return evaluate(ExtremalOperator(params, sign), u, points, q)


def eval_extremal_even(u: GridField, x, params: EllipticityParams, sign, q=None) -> OperatorValue:
    return eval_extremal_even_batch(u, x, params, sign, q).at(0)


def eval_D_tau_batch(u, points, params, q=None) -> OperatorBatch:
    return evaluate(DTauOperator(params), u, points, q)


def eval_D_tau(u: GridField, x, params: EllipticityParams, q=None) -> OperatorValue:
    return eval_D_tau_batch(u, x, params, q).at(0)


def eval_M_L0_batch(u, points, params, sign, q=None) -> OperatorBatch:
    return evaluate(ExtremalOperator(params, sign, with_drift=True), u, points, q)


def eval_M_L0(u: GridField, x, params: EllipticityParams, sign, q=None) -> OperatorValue:
    return eval_M_L0_batch(u, x, params, sign, q).at(0)


def eval_inf_sup_batch(family: KernelFamily, u, points, q=None) -> OperatorBatch:
    return evaluate(InfSupOperator(family), u, points, q)


def eval_inf_sup(family: KernelFamily, u: GridField, x, q=None) -> float:
    return float(eval_inf_sup_batch(family, u, x, q).value[0])


@dataclass(frozen=True)
class FamilyExtremes:
    sup: np.ndarray
    inf: np.ndarray
    tolerance: np.ndarray


def extremal_over_family(members: Sequence[KernelSpec], u: GridField, points, q=None) -> FamilyExtremes:
    """Sampled sup and inf of Lu over a finite list of kernels."""
    if not members:
        raise InvalidFamilyError("kernel family is empty")
    op = InfSupOperator([members])
    _check_dim(op, u)
    q = q or QuadratureConfig()
    nodes = q.resolve(u)
    sampler = DifferenceSampler(u, points, nodes)
    batches = op.member_batches(sampler.samples(u.flat_values), nodes)
    values = np.stack([b.value for b in batches])
    tol = np.max(np.stack([b.tolerance for b in batches]), axis=0)
    return FamilyExtremes(sup=values.max(axis=0), inf=values.min(axis=0), tolerance=tol)


# ---- Scaling ----


@dataclass(frozen=True)
class ScalingCheck:
    lhs: float
    rhs: float
    tolerance: float
    exponent: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def ok(self) -> bool:
        return self.gap <= self.tolerance + 1e-12 * max(1.0, abs(self.rhs))


def scaling_check(u: GridField, params: EllipticityParams, alpha: float, beta: float, x,
                  q: QuadratureConfig | None = None, operator: str = "M+") -> ScalingCheck:
    """
    Compare O[alpha u(beta .)](x) with alpha beta^s (O u)(beta x), where s is
    sigma for M+/M- and tau for |D_tau|.

    Quadrature radii are scaled with the field (r -> r/beta), so both sides use
    the same nodes up to the dilation.
    """
    q = q or QuadratureConfig()
    if operator in ("M+", "M-"):
        op = ExtremalOperator(params, operator[1])
        exponent = params.sigma
    elif operator == "D_tau":
        op = DTauOperator(params)
        exponent = params.tau
    else:
        raise InvalidParameterError(f"unknown operator {operator!r}; use M+, M- or D_tau")

    x = as_points(x, u.dim)[0]
    scaled = rescale(u, alpha, beta)
    q_scaled = replace(
        q,
        r_inner=None if q.r_inner is None else q.r_inner / beta,
        r_outer=None if q.r_outer is None else q.r_outer / beta,
    )
    left = evaluate(op, scaled, x, q_scaled).at(0)
    right = evaluate(op, u, beta * x, q).at(0)
    factor = alpha * beta**exponent
    return ScalingCheck(
        lhs=left.value,
        rhs=factor * right.value,
        tolerance=left.tolerance + factor * right.tolerance,
        exponent=exponent,
    )
