"""
Ellipticity parameters and kernel classes.

- EllipticityParams: (sigma, tau, lambda, Lambda, b) plus the universal
  constants (sigma0, tau0, m, A0) behind hypotheses H1-H3.
- KernelSpec: translation-invariant even/odd kernel pair.
- verify_kernel_class: sampled membership in L0, L0~ (nonnegative total
  kernel) and L1 (translate-integral bound outside B_rho0).
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import integrate

from config import KERNEL_SAMPLE_ANGLES, KERNEL_SAMPLE_RADII, RHO0_L1
from services.errors import InvalidParameterError, KernelSingularityError

logger = logging.getLogger(__name__)

# y (N, n) -> values (N,)
KernelMap = Callable[[np.ndarray], np.ndarray]

_RTOL = 1e-9


def sphere_area(dim: int) -> float:
    """|S^{n-1}|: 2 in 1D, 2*pi in 2D."""
    return 2.0 if dim == 1 else 2.0 * math.pi


def abs_first_moment(dim: int) -> float:
    """Integral of |theta_1| over the unit sphere."""
    return 2.0 if dim == 1 else 4.0


def radii_of(y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(y * y, axis=-1))


# ---- Parameters ----


@dataclass(frozen=True)
class UniversalConstants:
    sigma0: float = 0.5
    tau0: float = 0.1
    m: float = 0.5
    A0: float = 1.0


@dataclass(frozen=True)
class EllipticityParams:
    sigma: float
    tau: float
    lambda_lo: float = 1.0
    lambda_hi: float = 1.0
    b: float = 0.0
    dim: int = 1
    universal: UniversalConstants = field(default_factory=UniversalConstants)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidParameterError(f"dim must be 1 or 2, got {self.dim}")

    def with_changes(self, **changes) -> "EllipticityParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        u = self.universal
        return {
            "sigma": self.sigma,
            "tau": self.tau,
            "lambda_lo": self.lambda_lo,
            "lambda_hi": self.lambda_hi,
            "b": self.b,
            "dim": self.dim,
            "sigma0": u.sigma0,
            "tau0": u.tau0,
            "m": u.m,
            "A0": u.A0,
        }


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    margin: float


@dataclass(frozen=True)
class HypothesisReport:
    h1: HypothesisCheck
    h2: HypothesisCheck
    h3: HypothesisCheck
    ellipticity: HypothesisCheck

    @property
    def ok(self) -> bool:
        return self.h1.passed and self.h2.passed and self.h3.passed and self.ellipticity.passed

    def failures(self) -> list[str]:
        return [c.name for c in (self.h1, self.h2, self.h3, self.ellipticity) if not c.passed]


def _require_finite(params: EllipticityParams):
    bad = [k for k, v in params.as_dict().items() if not math.isfinite(float(v))]
    if bad:
        raise InvalidParameterError(f"non-finite parameter(s): {', '.join(bad)}")


def check_hypotheses(params: EllipticityParams) -> HypothesisReport:
    """Evaluate H1, H2, H3 and 0 < lambda <= Lambda with their margins."""
    _require_finite(params)
    s, t = params.sigma, params.tau
    u = params.universal

    h1_pass = (2.0 > s >= u.sigma0 > 0.0) and (min(1.0, s) > t >= u.tau0 > 0.0)
    h1_margin = min(2.0 - s, s - u.sigma0, u.sigma0, min(1.0, s) - t, t - u.tau0, u.tau0)

    h2_margin = s - t - u.m
    h2_pass = (s - t >= u.m) and u.m > 0.0

    lhs = params.lambda_lo * u.A0 * (2.0 - s)
    rhs = params.b * (1.0 - t)
    h3_margin = lhs - rhs
    h3_pass = lhs >= rhs

    ell_pass = 0.0 < params.lambda_lo <= params.lambda_hi
    ell_margin = min(params.lambda_lo, params.lambda_hi - params.lambda_lo)

    return HypothesisReport(
        h1=HypothesisCheck("H1", h1_pass, h1_margin),
        h2=HypothesisCheck("H2", h2_pass, h2_margin),
        h3=HypothesisCheck("H3", h3_pass, h3_margin),
        ellipticity=HypothesisCheck("ellipticity", ell_pass, ell_margin),
    )


def check_smallness(params: EllipticityParams) -> HypothesisCheck:
    """2b <= lambda (2 - sigma) / (1 - tau), required by the ABP cover."""
    _require_finite(params)
    bound = params.lambda_lo * (2.0 - params.sigma) / (1.0 - params.tau)
    return HypothesisCheck("smallness", 2.0 * params.b <= bound, bound - 2.0 * params.b)


# ---- Kernels ----


@dataclass(frozen=True)
class KernelSpec:
    """
    Translation-invariant kernel K = K_e + K_o.

    Args:
        even_part: y -> K_e(y), even, nonnegative.
        odd_part: y -> K_o(y), odd.
        params: the ellipticity class the kernel is meant to belong to.
        rho0: continuity radius for the L1 translate integral.
        l1_constant: declared constant C of the translate integral (None: only
            finiteness is required).
        even_moment: rho -> integral of y_1^2 K_e over B_rho, when known in
            closed form.
        odd_moment: rho -> integral of y K_o over B_rho (vector), when known.
        even_outer_mass: rho -> integral of K_e outside B_rho, when known.
    """

    even_part: KernelMap
    odd_part: KernelMap
    params: EllipticityParams
    rho0: float = RHO0_L1
    name: str = "custom"
    l1_constant: float | None = None
    tau_pair: tuple[float, float] | None = None
    even_moment: Callable[[float], float] | None = None
    odd_moment: Callable[[float], np.ndarray] | None = None
    even_outer_mass: Callable[[float], float] | None = None

    @property
    def dim(self) -> int:
        return self.params.dim

    def evaluate(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (K_e(y), K_o(y)); raises on any non-finite value."""
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        ke = np.asarray(self.even_part(y), dtype=float).reshape(-1)
        ko = np.asarray(self.odd_part(y), dtype=float).reshape(-1)
        bad = ~(np.isfinite(ke) & np.isfinite(ko))
        if bad.any():
            first = y[np.argmax(bad)]
            raise KernelSingularityError(
                f"kernel {self.name} is not finite at y={first.tolist()}", y=first.tolist()
            )
        return ke, ko

    def total(self, y: np.ndarray) -> np.ndarray:
        ke, ko = self.evaluate(y)
        return ke + ko

    # Inner/outer pieces used by the quadrature; each returns (estimate, error).

    def second_moment(self, rho: float) -> tuple[float, float]:
        if self.even_moment is not None:
            return float(self.even_moment(rho)), 0.0
        p = self.params
        base = sphere_area(p.dim) / p.dim * rho ** (2.0 - p.sigma)
        lo, hi = p.lambda_lo * base, p.lambda_hi * base
        return 0.5 * (lo + hi), 0.5 * (hi - lo)

    def first_moment(self, rho: float) -> tuple[np.ndarray, float]:
        if self.odd_moment is not None:
            return np.asarray(self.odd_moment(rho), dtype=float), 0.0
        p = self.params
        return np.zeros(p.dim), sphere_area(p.dim) * p.b * rho ** (1.0 - p.tau)

    def outer_mass(self, rho: float) -> tuple[float, float]:
        if self.even_outer_mass is not None:
            return float(self.even_outer_mass(rho)), 0.0
        p = self.params
        base = (2.0 - p.sigma) * sphere_area(p.dim) * rho ** (-p.sigma) / p.sigma
        lo, hi = p.lambda_lo * base, p.lambda_hi * base
        return 0.5 * (lo + hi), 0.5 * (hi - lo)


def _power_even(params: EllipticityParams, c: float) -> KernelMap:
    n, s = params.dim, params.sigma

    def k_e(y):
        return (2.0 - s) * c / radii_of(y) ** (n + s)

    return k_e


def _capped_odd_profile(params: EllipticityParams, amplitudes, cap: float):
    """r -> min(b * max_i (1 - t_i) r^{-n-t_i}, (2 - sigma) cap r^{-n-sigma})."""
    n, s = params.dim, params.sigma

    def k(r):
        r = np.asarray(r, dtype=float)
        odd = np.zeros_like(r)
        for b, t in amplitudes:
            odd = np.maximum(odd, b * (1.0 - t) / r ** (n + t))
        return np.minimum(odd, (2.0 - s) * cap / r ** (n + s))

    return k


def _odd_from_profile(profile) -> KernelMap:
    def k_o(y):
        return np.sign(y[:, 0]) * profile(radii_of(y))

    return k_o


def _odd_moment_from_profile(params: EllipticityParams, profile):
    n = params.dim
    a_n = abs_first_moment(n)

    def moment(rho):
        value, _ = integrate.quad(lambda r: r**n * float(profile(r)), 0.0, rho, limit=200)
        out = np.zeros(n)
        out[0] = a_n * value
        return out

    return moment


def _build_kernel(params, name, c_even, odd_amplitudes, rho0, l1_constant, tau_pair=None):
    n, s = params.dim, params.sigma
    area = sphere_area(n)
    even_moment = lambda rho: c_even * area / n * rho ** (2.0 - s)  # noqa: E731
    outer = lambda rho: (2.0 - s) * c_even * area * rho ** (-s) / s  # noqa: E731

    if odd_amplitudes:
        profile = _capped_odd_profile(params, odd_amplitudes, c_even)
        odd = _odd_from_profile(profile)
        odd_moment = _odd_moment_from_profile(params, profile)
    else:
        odd = lambda y: np.zeros(len(y))  # noqa: E731
        odd_moment = lambda rho: np.zeros(n)  # noqa: E731

    return KernelSpec(
        even_part=_power_even(params, c_even),
        odd_part=odd,
        params=params,
        rho0=rho0,
        name=name,
        l1_constant=l1_constant,
        tau_pair=tau_pair,
        even_moment=even_moment,
        odd_moment=odd_moment,
        even_outer_mass=outer,
    )


def frac_laplace(params: EllipticityParams, c: float, rho0: float = RHO0_L1, l1_constant=None) -> KernelSpec:
    """K_e = (2 - sigma) c / |y|^{n+sigma}, K_o = 0."""
    return _build_kernel(params, f"frac-laplace({c:g})", c, [], rho0, l1_constant)


def odd_power(params: EllipticityParams, b: float, tau: float, rho0: float = RHO0_L1, l1_constant=None) -> KernelSpec:
    """Even part at the lower bound lambda, odd part of order tau capped so K >= 0."""
    return _build_kernel(
        params, f"odd-power({b:g},{tau:g})", params.lambda_lo, [(b, tau)], rho0, l1_constant
    )


def mixed(params: EllipticityParams, c: float, b: float, rho0: float = RHO0_L1, l1_constant=None) -> KernelSpec:
    return _build_kernel(
        params, f"mixed({c:g},{b:g})", c, [(b, params.tau)], rho0, l1_constant
    )


def two_tau(params: EllipticityParams, b: float, tau1: float, tau2: float, rho0: float = RHO0_L1,
            l1_constant=None) -> KernelSpec:
    """Odd part bounded by b max((1-tau1)/|y|^{n+tau1}, (1-tau2)/|y|^{n+tau2})."""
    return _build_kernel(
        params,
        f"two-tau({b:g},{tau1:g},{tau2:g})",
        params.lambda_lo,
        [(b, tau1), (b, tau2)],
        rho0,
        l1_constant,
        tau_pair=(tau1, tau2),
    )


KERNEL_REGISTRY = {
    "frac-laplace": (frac_laplace, 1),
    "odd-power": (odd_power, 2),
    "mixed": (mixed, 2),
    "two-tau": (two_tau, 3),
}

_NAME_RE = re.compile(r"^\s*([a-z][a-z\-]*)\s*\(([^)]*)\)\s*$")


def kernel_from_name(name: str, params: EllipticityParams, rho0: float = RHO0_L1,
                     l1_constant: float | None = None) -> KernelSpec:
    """Build a named kernel such as 'frac-laplace(1.5)' or 'mixed(1,0.1)'."""
    m = _NAME_RE.match(name)
    if not m or m.group(1) not in KERNEL_REGISTRY:
        raise InvalidParameterError(
            f"unknown kernel {name!r}; known: {', '.join(sorted(KERNEL_REGISTRY))}"
        )
    builder, arity = KERNEL_REGISTRY[m.group(1)]
    try:
        args = [float(a) for a in m.group(2).split(",") if a.strip()]
    except ValueError as exc:
        raise InvalidParameterError(f"bad kernel arguments in {name!r}") from exc
    if len(args) != arity:
        raise InvalidParameterError(f"{m.group(1)} takes {arity} argument(s), got {len(args)}")
    return builder(params, *args, rho0=rho0, l1_constant=l1_constant)


def random_kernel(params: EllipticityParams, rng: np.random.Generator, rho0: float = RHO0_L1) -> KernelSpec:
    """A random member of L0~: amplitude c in [lambda, Lambda], odd amplitude in [0, b]."""
    c = float(rng.uniform(params.lambda_lo, params.lambda_hi))
    b = float(rng.uniform(0.0, params.b)) if params.b > 0 else 0.0
    spec = mixed(params, c, b, rho0=rho0)
    if rng.random() < 0.5:
        return spec
    # Mirror the odd part; the moments flip sign with it.
    odd, moment = spec.odd_part, spec.odd_moment
    return replace(
        spec,
        name=f"mixed({c:g},-{b:g})",
        odd_part=lambda y: -odd(y),
        odd_moment=lambda rho: -moment(rho),
    )


# ---- Class verification ----


@dataclass(frozen=True)
class KernelClassReport:
    symmetric: bool
    l0: bool
    l0_tilde: bool
    l1: bool
    even_lower_margin: float
    even_upper_margin: float
    odd_margin: float
    min_total: float
    translate_integral: float
    l1_constant: float | None
    two_exponent_ok: bool | None = None
    samples: int = 0


def sample_offsets(dim: int, sample_radii, angles: int = KERNEL_SAMPLE_ANGLES) -> np.ndarray:
    """Deterministic radial x angular sample; 1D uses both signs."""
    radii = np.asarray(sample_radii, dtype=float)
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        theta = 2.0 * np.pi * (np.arange(angles) + 0.5) / angles
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)


def translate_integral(spec: KernelSpec, shifts=None) -> float:
    """max over shifts h of the integral of |K(y) - K(y - h)| / |h| outside B_rho0."""
    n, rho0 = spec.dim, spec.rho0
    if shifts is None:
        mags = [rho0 / 2.0, rho0 / 4.0, rho0 / 8.0]
        basis = [np.eye(n)[i] for i in range(n)]
        shifts = [m * e for m in mags for e in basis]
    worst = 0.0
    for h in shifts:
        h = np.asarray(h, dtype=float).reshape(n)
        hn = float(np.linalg.norm(h))
        if hn == 0.0 or hn > rho0 / 2.0 * (1 + _RTOL):
            raise InvalidParameterError(f"shift {h.tolist()} must satisfy 0 < |h| <= rho0/2")
        if n == 1:
            value = _translate_integral_1d(spec, float(h[0]))
        else:
            value = _translate_integral_2d(spec, h)
        worst = max(worst, value / hn)
    return worst


def _translate_integral_1d(spec: KernelSpec, h: float) -> float:
    def integrand(t):
        pts = np.array([[t], [t - h]])
        k = spec.total(pts)
        return abs(k[0] - k[1])

    rho0 = spec.rho0
    total = 0.0
    for lo, hi in ((rho0, 1.0), (1.0, np.inf), (-1.0, -rho0), (-np.inf, -1.0)):
        if lo >= hi:
            continue
        value, _ = integrate.quad(integrand, lo, hi, limit=200)
        total += value
    return total


def _translate_integral_2d(spec: KernelSpec, h: np.ndarray, radial: int = 400, angular: int = 128) -> float:
    t_edges = np.linspace(math.log(spec.rho0), math.log(spec.rho0) + math.log(1e6), radial + 1)
    t_mid = 0.5 * (t_edges[1:] + t_edges[:-1])
    dt = t_edges[1] - t_edges[0]
    r = np.exp(t_mid)
    theta = 2.0 * np.pi * (np.arange(angular) + 0.5) / angular
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    y = (r[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
    diff = np.abs(spec.total(y) - spec.total(y - h[None, :]))
    weights = (np.repeat(r**2 * dt, angular)) * (2.0 * np.pi / angular)
    return float(np.sum(diff * weights))


def verify_kernel_class(spec: KernelSpec, sample_radii=None, shifts=None) -> KernelClassReport:
    """Check the L0 bounds, K >= 0 and the translate integral on a fixed sample."""
    if sample_radii is None:
        sample_radii = np.logspace(-3.0, 3.0, KERNEL_SAMPLE_RADII)
    sample_radii = np.asarray(sample_radii, dtype=float)
    if sample_radii.size == 0 or np.any(sample_radii <= 0):
        raise InvalidParameterError("sample_radii must be nonempty and positive")

    p = spec.params
    n = p.dim
    y = sample_offsets(n, sample_radii)
    ke, ko = spec.evaluate(y)
    ke_m, ko_m = spec.evaluate(-y)
    r = radii_of(y)

    scale = np.maximum(np.abs(ke), 1e-300)
    symmetric = bool(
        np.all(np.abs(ke - ke_m) <= _RTOL * scale) and np.all(np.abs(ko + ko_m) <= _RTOL * scale)
    )

    lower = (2.0 - p.sigma) * p.lambda_lo / r ** (n + p.sigma)
    upper = (2.0 - p.sigma) * p.lambda_hi / r ** (n + p.sigma)
    odd_bound = (1.0 - p.tau) * p.b / r ** (n + p.tau)

    lower_rel = np.min(ke / lower - 1.0)
    upper_rel = np.min(1.0 - ke / upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        odd_rel = np.where(odd_bound > 0, 1.0 - np.abs(ko) / odd_bound, np.where(ko == 0, 1.0, -np.inf))
    odd_margin = float(np.min(odd_rel))

    l0 = symmetric and lower_rel >= -_RTOL and upper_rel >= -_RTOL and odd_margin >= -_RTOL

    total = np.concatenate([ke + ko, ke_m + ko_m])
    min_rel_total = float(np.min(total / np.concatenate([scale, scale])))
    l0_tilde = l0 and min_rel_total >= -_RTOL

    integral = translate_integral(spec, shifts)
    if spec.l1_constant is None:
        l1_ok = math.isfinite(integral)
    else:
        l1_ok = integral <= spec.l1_constant
    l1 = l0_tilde and l1_ok

    two_exp = None
    if spec.tau_pair is not None:
        t1, t2 = spec.tau_pair
        bound2 = p.b * np.maximum((1.0 - t1) / r ** (n + t1), (1.0 - t2) / r ** (n + t2))
        two_exp = bool(np.all(np.abs(ko) <= bound2 * (1.0 + _RTOL)))

    logger.debug(
        "[kernel] %s: L0=%s L0~=%s L1=%s translate=%.6g", spec.name, l0, l0_tilde, l1, integral
    )
    return KernelClassReport(
        symmetric=symmetric,
        l0=bool(l0),
        l0_tilde=bool(l0_tilde),
        l1=bool(l1),
        even_lower_margin=float(lower_rel),
        even_upper_margin=float(upper_rel),
        odd_margin=odd_margin,
        min_total=float(np.min(total)),
        translate_integral=float(integral),
        l1_constant=spec.l1_constant,
        two_exponent_ok=two_exp,
        samples=int(len(y)),
    )
