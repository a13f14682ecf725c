"""
Bounded functions on R^n stored as node values on [-R, R]^n plus an explicit tail.

Evaluation is multilinear inside the box (exact at nodes) and falls back to the
tail model outside. Quadrature may sample through tensor cubic Lagrange
weights instead (also exact at nodes). The pointwise differences delta_e / delta_o, the inf/sup
convolutions, the (alpha, beta) rescaling and incremental quotients all live
here.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse

from services.errors import InvalidParameterError

logger = logging.getLogger(__name__)

_SNAP = 1e-9
INTERPOLATIONS = ("linear", "cubic")
_LAGRANGE_DENOM = np.array([-6.0, 2.0, -2.0, 6.0])


def _lagrange4(local: np.ndarray) -> np.ndarray:
    """Weights of nodes 0..3 at local coordinates, shape (..., 4)."""
    d = local[..., None] - np.arange(4.0)
    w = np.empty(d.shape)
    for j in range(4):
        others = [k for k in range(4) if k != j]
        w[..., j] = np.prod(d[..., others], axis=-1) / _LAGRANGE_DENOM[j]
    return w


# ---- Tail models ----


@dataclass(frozen=True)
class Tail:
    """Far-field model: 'constant', 'clamp' (nearest boundary value) or 'callable'."""

    kind: str
    constant: float = 0.0
    func: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = ""

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.constant!r}"
        if self.kind == "callable":
            return f"callable:{self.label or 'g'}"
        return "clamp"


def constant_tail(c: float) -> Tail:
    return Tail("constant", constant=float(c))


def clamp_tail() -> Tail:
    return Tail("clamp")


def callable_tail(g: Callable[[np.ndarray], np.ndarray], label: str = "g") -> Tail:
    return Tail("callable", func=g, label=label)


def as_points(x, dim: int) -> np.ndarray:
    """Coerce a point or a batch of points into an (M, dim) float array."""
    arr = np.asarray(x, dtype=float)
    if dim == 1:
        return arr.reshape(-1, 1)
    return arr.reshape(-1, dim)


# ---- Field ----


@dataclass(frozen=True, eq=False)
class GridField:
    dim: int
    box_radius: float
    spacing: float
    values: np.ndarray
    tail: Tail = field(default_factory=clamp_tail)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidParameterError(f"dim must be 1 or 2, got {self.dim}")
        if not (self.box_radius > 0 and self.spacing > 0):
            raise InvalidParameterError("box_radius and spacing must be positive")
        half = self.box_radius / self.spacing
        n_half = int(round(half))
        if n_half < 1 or abs(half - n_half) > 1e-9 * max(1.0, half):
            raise InvalidParameterError(
                f"R/h must be an integer >= 1 (R={self.box_radius}, h={self.spacing})"
            )
        n_cells = 2 * n_half
        arr = np.array(self.values, dtype=float)
        expected = (n_cells + 1,) * self.dim
        if arr.shape != expected:
            if arr.size != math.prod(expected):
                raise InvalidParameterError(f"expected {math.prod(expected)} node values, got {arr.size}")
            arr = arr.reshape(expected)
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError("grid values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    # ---- geometry ----

    @property
    def cells(self) -> int:
        return self.values.shape[0] - 1

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.box_radius + self.spacing * np.arange(self.cells + 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates in the ravel order of `values`, shape (M, dim)."""
        grids = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.ravel()

    def node_radii(self) -> np.ndarray:
        return np.sqrt(np.sum(self.nodes**2, axis=1))

    @classmethod
    def from_function(cls, f, dim: int, box_radius: float, spacing: float, tail: Tail | None = None):
        """Sample f (points (M, dim) -> (M,)) on the nodes."""
        template = cls(dim, box_radius, spacing, np.zeros((int(round(2 * box_radius / spacing)) + 1,) * dim))
        vals = np.asarray(f(template.nodes), dtype=float).reshape(template.values.shape)
        return cls(dim, box_radius, spacing, vals, tail or clamp_tail())

    def with_values(self, values) -> "GridField":
        return GridField(self.dim, self.box_radius, self.spacing, np.asarray(values, dtype=float), self.tail)

    def with_tail(self, tail: Tail) -> "GridField":
        return GridField(self.dim, self.box_radius, self.spacing, self.values, tail)

    # ---- evaluation ----

    def _box_weights(self, pts: np.ndarray, interpolation: str = "linear"):
        """Corner indices and weights for points inside the box."""
        h, n = self.spacing, self.cells
        t = (pts + self.box_radius) / h
        nearest = np.rint(t)
        t = np.where(np.abs(t - nearest) < _SNAP, nearest, t)
        if interpolation == "cubic" and n >= 3:
            return self._cubic_weights(t)
        base = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
        frac = np.clip(t - base, 0.0, 1.0)
        shape = (n + 1,) * self.dim
        cols, weights = [], []
        for bits in itertools.product((0, 1), repeat=self.dim):
            bits = np.array(bits)
            idx = base + bits
            w = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
            cols.append(np.ravel_multi_index(tuple(idx.T), shape))
            weights.append(w)
        return np.stack(cols, axis=1), np.stack(weights, axis=1)

    def _cubic_weights(self, t: np.ndarray):
        """
        Tensor 4-point Lagrange weights. The stencil is shifted inward at the
        box faces, so node points still get a single unit weight.
        """
        n = self.cells
        start = np.clip(np.floor(t).astype(np.int64) - 1, 0, n - 3)
        axis_w = _lagrange4(t - start)
        shape = (n + 1,) * self.dim
        dims = np.arange(self.dim)
        cols, weights = [], []
        for offs in itertools.product(range(4), repeat=self.dim):
            offs = np.array(offs)
            cols.append(np.ravel_multi_index(tuple((start + offs).T), shape))
            weights.append(np.prod(axis_w[:, dims, offs], axis=1))
        return np.stack(cols, axis=1), np.stack(weights, axis=1)

    def inside(self, pts: np.ndarray) -> np.ndarray:
        return np.all(np.abs(pts) <= self.box_radius * (1.0 + 1e-12), axis=1)

    def sampling_operator(self, points, interpolation: str = "linear") -> tuple[sparse.csr_matrix, np.ndarray]:
        """
        Linear form of evaluation: u(points) = A @ flat_values + offset.

        Rows for points covered by the box (or by a clamp tail) carry the
        interpolation weights ('linear' is multilinear and nonnegative,
        'cubic' is tensor Lagrange); other rows are empty and `offset` holds
        the tail.
        """
        if interpolation not in INTERPOLATIONS:
            raise InvalidParameterError(f"interpolation must be one of {INTERPOLATIONS}, got {interpolation!r}")
        pts = as_points(points, self.dim)
        m = len(pts)
        inside = self.inside(pts)
        offset = np.zeros(m)
        if self.tail.kind == "clamp":
            covered = np.ones(m, dtype=bool)
            where = np.clip(pts, -self.box_radius, self.box_radius)
        else:
            covered = inside
            where = pts
            outside = ~inside
            if outside.any():
                offset[outside] = self._tail_values(pts[outside])
        rows_idx = np.nonzero(covered)[0]
        cols, weights = self._box_weights(where[covered], interpolation)
        keep = weights != 0.0
        rows = np.repeat(rows_idx, cols.shape[1]).reshape(cols.shape)
        mat = sparse.csr_matrix(
            (weights[keep], (rows[keep], cols[keep])), shape=(m, self.values.size)
        )
        return mat, offset

    def _tail_values(self, pts: np.ndarray) -> np.ndarray:
        if self.tail.kind == "constant":
            return np.full(len(pts), self.tail.constant)
        if self.tail.kind == "callable":
            return np.asarray(self.tail.func(pts), dtype=float).reshape(-1)
        return self.evaluate(np.clip(pts, -self.box_radius, self.box_radius))

    def evaluate(self, points) -> np.ndarray:
        pts = as_points(points, self.dim)
        out = np.empty(len(pts))
        inside = self.inside(pts)
        if inside.any():
            cols, weights = self._box_weights(pts[inside])
            out[inside] = np.sum(self.flat_values[cols] * weights, axis=1)
        if (~inside).any():
            out[~inside] = self._tail_values(pts[~inside])
        return out

    def __call__(self, points) -> np.ndarray:
        return self.evaluate(points)

    # ---- norms ----

    def tail_sample_points(self, shells: int = 12, angles: int = 16) -> np.ndarray:
        radii = self.box_radius * (1.0 + 2.0 ** np.arange(-2, shells - 2))
        if self.dim == 1:
            dirs = np.array([[1.0], [-1.0]])
        else:
            th = 2.0 * np.pi * np.arange(angles) / angles
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, self.dim)

    def sample_values(self) -> np.ndarray:
        """Node values together with tail samples."""
        if self.tail.kind == "clamp":
            return self.flat_values
        return np.concatenate([self.flat_values, self._tail_values(self.tail_sample_points())])

    def tail_sup(self) -> float:
        """Largest |tail| over the tail sample points; 0 for a clamp tail."""
        if self.tail.kind == "clamp":
            return 0.0
        return float(np.max(np.abs(self._tail_values(self.tail_sample_points()))))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.sample_values())))


def sup_norm(u: GridField) -> float:
    return u.sup_norm()


def oscillation(u: GridField) -> float:
    vals = u.sample_values()
    return float(np.max(vals) - np.min(vals))


# ---- Pointwise differences ----


def delta_even(u: GridField, x, y) -> float:
    """u(x+y) + u(x-y) - 2u(x)."""
    x = as_points(x, u.dim)[0]
    y = as_points(y, u.dim)[0]
    v = u.evaluate(np.stack([x + y, x - y, x]))
    return float(v[0] + v[1] - 2.0 * v[2])


def delta_odd(u: GridField, x, y) -> float:
    """u(x+y) - u(x-y)."""
    x = as_points(x, u.dim)[0]
    y = as_points(y, u.dim)[0]
    v = u.evaluate(np.stack([x + y, x - y]))
    return float(v[0] - v[1])


# ---- Transformations ----


def negated(u: GridField) -> GridField:
    tail = u.tail
    if tail.kind == "constant":
        tail = constant_tail(-tail.constant)
    elif tail.kind == "callable":
        g = tail.func
        tail = callable_tail(lambda x: -np.asarray(g(x)), label=f"-{tail.label}")
    return GridField(u.dim, u.box_radius, u.spacing, -u.values, tail)


def rescale(u: GridField, alpha: float, beta: float) -> GridField:
    """x -> alpha * u(beta * x) on [-R/beta, R/beta]^n with spacing h/beta."""
    if not (alpha > 0 and beta > 0):
        raise InvalidParameterError("rescale needs alpha > 0 and beta > 0")
    tail = u.tail
    if tail.kind == "constant":
        tail = constant_tail(alpha * tail.constant)
    elif tail.kind == "callable":
        g = tail.func
        tail = callable_tail(lambda x: alpha * np.asarray(g(beta * np.asarray(x))), label=tail.label)
    return GridField(u.dim, u.box_radius / beta, u.spacing / beta, alpha * u.values, tail)


def _lattice_offsets(dim: int, radius_cells: int, spacing: float, radius: float):
    rng = range(-radius_cells, radius_cells + 1)
    offsets = [k for k in itertools.product(rng, repeat=dim) if spacing * math.hypot(*k) <= radius]
    return np.array(offsets, dtype=np.int64).reshape(-1, dim)


def inf_convolution(u: GridField, eps: float) -> GridField:
    """u_eps(x) = min_z u(z) + |z - x|^2 / eps over lattice points near x."""
    if not eps > 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    h, n_cells, dim = u.spacing, u.cells, u.dim
    radius = 2.0 * math.sqrt(eps * oscillation(u)) + h
    p = int(math.ceil(radius / h))
    offsets = _lattice_offsets(dim, p, h, radius)

    ext_axis = -u.box_radius - p * h + h * np.arange(n_cells + 1 + 2 * p)
    grids = np.meshgrid(*([ext_axis] * dim), indexing="ij")
    ext_pts = np.stack([g.ravel() for g in grids], axis=1)
    ext = u.evaluate(ext_pts).reshape((n_cells + 1 + 2 * p,) * dim)

    out = np.full(u.values.shape, np.inf)
    for k in offsets:
        window = tuple(slice(p + int(kk), p + int(kk) + n_cells + 1) for kk in k)
        out = np.minimum(out, ext[window] + (h * h * float(k @ k)) / eps)

    shift_vecs = h * offsets.astype(float)
    penalties = np.sum(shift_vecs**2, axis=1) / eps

    def tail_func(x):
        x = as_points(x, dim)
        cand = u.evaluate((x[:, None, :] + shift_vecs[None, :, :]).reshape(-1, dim))
        return np.min(cand.reshape(len(x), -1) + penalties[None, :], axis=1)

    return GridField(dim, u.box_radius, h, out, callable_tail(tail_func, label=f"inf-conv({eps:g})"))


def sup_convolution(u: GridField, eps: float) -> GridField:
    """u^eps(x) = max_z u(z) - |z - x|^2 / eps."""
    return negated(inf_convolution(negated(u), eps))


def incremental_quotient(u: GridField, hstep: float, e, gamma: float) -> GridField:
    """x -> (u(x + hstep e) - u(x)) / |hstep|^gamma."""
    if hstep == 0:
        raise InvalidParameterError("hstep must be nonzero")
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameterError(f"gamma must lie in [0, 1], got {gamma}")
    e = as_points(e, u.dim)[0]
    e = e / np.linalg.norm(e)
    shift = hstep * e
    scale = abs(hstep) ** gamma

    vals = (u.evaluate(u.nodes + shift) - u.flat_values) / scale

    def tail_func(x):
        x = as_points(x, u.dim)
        return (u.evaluate(x + shift) - u.evaluate(x)) / scale

    return GridField(
        u.dim, u.box_radius, u.spacing, vals, callable_tail(tail_func, label=f"quotient({hstep:g})")
    )


# ---- CSV dump ----


def write_csv(u: GridField, path) -> Path:
    """Node dump with a '# key=value' header; floats use 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["x", "value"] if u.dim == 1 else ["x", "y", "value"]
    header = "\n".join(
        [
            f"dim={u.dim}",
            f"box_radius={u.box_radius!r}",
            f"spacing={u.spacing!r}",
            f"tail={u.tail.describe()}",
            ",".join(cols),
        ]
    )
    data = np.column_stack([u.nodes, u.flat_values])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="# ")
    return path


def read_csv(path, tail_resolver: dict | None = None) -> GridField:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    try:
        dim = int(meta["dim"])
        box_radius = float(meta["box_radius"])
        spacing = float(meta["spacing"])
    except (KeyError, ValueError) as exc:
        raise InvalidParameterError(f"{path}: missing or bad grid header") from exc

    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    desc = meta.get("tail", "clamp")
    if desc.startswith("constant:"):
        tail = constant_tail(float(desc.split(":", 1)[1]))
    elif desc.startswith("callable:"):
        label = desc.split(":", 1)[1]
        if tail_resolver and label in tail_resolver:
            tail = callable_tail(tail_resolver[label], label=label)
        else:
            logger.warning("[warn] %s: callable tail %r not resolvable; using clamp", path, label)
            tail = clamp_tail()
    else:
        tail = clamp_tail()
    return GridField(dim, box_radius, spacing, data[:, -1], tail)
