"""
Named test fields: 'gauss(4)', 'abs-power(0.5)', 'dip(0.5,0.25,0)', ...

The smooth 1-D fields also come with closed forms and a reference quadrature
of the fractional second difference.
"""

import math
import re

import numpy as np
from scipy import integrate

from services.errors import InvalidParameterError
from services.gridfield import GridField, callable_tail, clamp_tail, constant_tail


def _radius(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=1))


def gauss(dim, box_radius, spacing, a=1.0):
    """exp(-a |x|^2); zero tail."""
    return GridField.from_function(lambda x: np.exp(-a * _radius(x) ** 2), dim, box_radius, spacing,
                                   constant_tail(0.0))


def cosine_bump(dim, box_radius, spacing, width=1.0):
    """cos^2(pi |x| / (2 width)) inside B_width; zero tail."""
    def f(x):
        r = _radius(x)
        return np.where(r < width, np.cos(0.5 * np.pi * r / width) ** 2, 0.0)
    return GridField.from_function(f, dim, box_radius, spacing, constant_tail(0.0))


def shifted_gauss(dim, box_radius, spacing, shift=0.25):
    """exp(-8 |x - shift e1|^2) + shift; constant tail equal to the shift."""
    def f(x):
        y = x.copy()
        y[:, 0] -= shift
        return np.exp(-8.0 * _radius(y) ** 2) + shift
    return GridField.from_function(f, dim, box_radius, spacing, constant_tail(shift))


def linear(dim, box_radius, spacing, slope=1.0, offset=0.0):
    """slope x1 + offset, extended exactly past the box."""
    def f(x):
        return slope * np.asarray(x)[:, 0] + offset
    return GridField.from_function(f, dim, box_radius, spacing, callable_tail(f, label=f"linear({slope:g})"))


def constant(dim, box_radius, spacing, value=1.0):
    return GridField.from_function(lambda x: np.full(len(x), value), dim, box_radius, spacing,
                                   constant_tail(value))


def abs_power(dim, box_radius, spacing, p=0.5):
    """|x|^p with the clamp tail."""
    return GridField.from_function(lambda x: _radius(x) ** p, dim, box_radius, spacing, clamp_tail())


def capped_inverse(dim, box_radius, spacing, cap=10.0):
    """min(cap, 1/|x|); tail 1/|x| decays so the clamp tail is used."""
    def f(x):
        return 1.0 / np.maximum(_radius(x), 1.0 / cap)
    return GridField.from_function(f, dim, box_radius, spacing, clamp_tail())


def sign_strips(dim, box_radius, spacing, freq=8.0):
    """sign(sin(pi freq x1)); rough exterior data."""
    def f(x):
        s = np.sign(np.sin(np.pi * freq * np.asarray(x)[:, 0]))
        return np.where(s == 0, 1.0, s)
    return GridField.from_function(f, dim, box_radius, spacing, callable_tail(f, label=f"sign-strips({freq:g})"))


def dip(dim, box_radius, spacing, depth=0.5, width=0.25, center=0.0):
    """-depth (1 - |x - c e1|^2 / width^2)_+ : nonnegative outside B_1 when |c| + width <= 1."""
    def f(x):
        y = np.array(x, dtype=float)
        y[:, 0] -= center
        return -depth * np.maximum(1.0 - _radius(y) ** 2 / width**2, 0.0)
    return GridField.from_function(f, dim, box_radius, spacing, constant_tail(0.0))


def piecewise_random(dim, box_radius, spacing, seed=0.0, pieces=8.0):
    """Random piecewise-linear profile in x1 with values in [-1, 1]; zero outside B_1."""
    rng = np.random.default_rng(int(seed))
    knots = np.linspace(-1.0, 1.0, int(pieces) + 1)
    heights = rng.uniform(-1.0, 1.0, size=knots.size)
    heights[0] = heights[-1] = 0.0

    def f(x):
        t = np.asarray(x)[:, 0]
        return np.where(np.abs(t) <= 1.0, np.interp(t, knots, heights), 0.0)
    return GridField.from_function(f, dim, box_radius, spacing, constant_tail(0.0))


FIELD_REGISTRY = {
    "gauss": gauss,
    "cosine-bump": cosine_bump,
    "shifted-gauss": shifted_gauss,
    "linear": linear,
    "constant": constant,
    "abs-power": abs_power,
    "capped-inverse": capped_inverse,
    "sign-strips": sign_strips,
    "dip": dip,
    "piecewise-random": piecewise_random,
}

_NAME_RE = re.compile(r"^\s*([a-z][a-z\-]*)\s*(?:\(([^)]*)\))?\s*$")


def field_from_name(name: str, dim: int, box_radius: float, spacing: float) -> GridField:
    """Build a catalog field from a name such as 'gauss(4)' or 'dip(0.5,0.25,0.1)'."""
    m = _NAME_RE.match(name)
    if not m or m.group(1) not in FIELD_REGISTRY:
        raise InvalidParameterError(f"unknown field {name!r}; known: {', '.join(sorted(FIELD_REGISTRY))}")
    try:
        args = [float(a) for a in (m.group(2) or "").split(",") if a.strip()]
    except ValueError as exc:
        raise InvalidParameterError(f"bad field arguments in {name!r}") from exc
    try:
        return FIELD_REGISTRY[m.group(1)](dim, box_radius, spacing, *args)
    except TypeError as exc:
        raise InvalidParameterError(f"{name!r}: {exc}") from exc


# Ten smooth fields used by the quadrature oracle sweep.
SMOOTH_FIELDS = (
    "gauss(4)",
    "gauss(6)",
    "gauss(8)",
    "gauss(16)",
    "cosine-bump(0.75)",
    "cosine-bump(1)",
    "cosine-bump(1.5)",
    "shifted-gauss(0.1)",
    "shifted-gauss(0.25)",
    "shifted-gauss(0.5)",
)


def smooth_oracle(name: str):
    """Closed form of a smooth catalog field as a scalar function of x1 (1-D only)."""
    m = _NAME_RE.match(name)
    kind = m.group(1) if m else None
    args = [float(a) for a in (m.group(2) or "").split(",") if a.strip()] if m else []
    if kind == "gauss":
        a = args[0] if args else 1.0
        return lambda t: math.exp(-a * t * t)
    if kind == "cosine-bump":
        w = args[0] if args else 1.0
        return lambda t: math.cos(0.5 * math.pi * abs(t) / w) ** 2 if abs(t) < w else 0.0
    if kind == "shifted-gauss":
        s = args[0] if args else 0.25
        return lambda t: math.exp(-8.0 * (t - s) ** 2) + s
    raise InvalidParameterError(f"no closed form for {name!r}")


def fractional_quad_oracle(f, x: float, sigma: float, c: float = 1.0, eps: float = 1e-3) -> float:
    """
    c (2 - sigma) * integral over R of (f(x+y) + f(x-y) - 2 f(x)) |y|^{-1-sigma}
    by adaptive quadrature on the exact function f (scalar -> scalar).
    Below eps the second difference is replaced by f''(x) y^2.
    """
    fx = f(x)

    def delta(y):
        return f(x + y) + f(x - y) - 2.0 * fx

    f2 = delta(eps) / eps**2
    near = f2 * eps ** (2.0 - sigma) / (2.0 - sigma)
    mid, _ = integrate.quad(lambda y: delta(y) * y ** (-1.0 - sigma), eps, 1.0, limit=200)
    far, _ = integrate.quad(lambda y: delta(y) * y ** (-1.0 - sigma), 1.0, np.inf, limit=200)
    return 2.0 * c * (2.0 - sigma) * (near + mid + far)


def ball_torsion(sigma: float, c: float = 1.0):
    """
    Exact 1-D Dirichlet pair on (-1, 1) for c (2 - sigma) |y|^{-1-sigma}:
    w(x) = (1 - x^2)_+^{sigma/2} has constant operator value f inside.
    Returns (f, w) with w acting on (M, 1) points.
    """
    f = -2.0 * c * (2.0 - sigma) * math.pi / math.sin(0.5 * math.pi * sigma)

    def w(x):
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        return np.maximum(1.0 - x[:, 0] ** 2, 0.0) ** (0.5 * sigma)

    return f, w
