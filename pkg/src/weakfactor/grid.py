"""Sampled functions on uniform cell-centred grids.

Every operator in the package acts on :class:`GridFn` objects that share a
single master :class:`GridSpec`.  Quadrature is the midpoint rule, and all
reductions go through :func:`math.fsum`, which is correctly rounded and hence
independent of summation order.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import PaddingError, PreconditionError, ResolutionWarning

MIN_POINTS = 4


def _vec(x, n=None) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"expected a vector, got shape {arr.shape}")
    if n is not None and arr.size != n:
        raise ValueError(f"expected {n} coordinates, got {arr.size}")
    return tuple(float(v) for v in arr)


def fsum(values) -> float:
    """Correctly rounded sum of an array (order independent)."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


@dataclass(frozen=True)
class Box:
    center: tuple[float, ...]
    half_width: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        hw = _vec(self.half_width)
        if len(hw) == 1 and len(self.center) > 1:
            hw = hw * len(self.center)
        object.__setattr__(self, "half_width", hw)
        if len(hw) != len(self.center):
            raise ValueError("center and half_width differ in dimension")
        if min(hw) <= 0:
            raise ValueError("half_width must be positive on every axis")

    @property
    def n(self) -> int:
        return len(self.center)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.half_width)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.half_width)


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")

    @property
    def n(self) -> int:
        return len(self.center)

    def volume(self) -> float:
        n = self.n
        return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * self.radius**n

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class GridSpec:
    box: Box
    points_per_axis: int

    def __post_init__(self):
        if int(self.points_per_axis) != self.points_per_axis or self.points_per_axis < MIN_POINTS:
            raise ValueError(f"points_per_axis must be an integer >= {MIN_POINTS}")
        object.__setattr__(self, "points_per_axis", int(self.points_per_axis))
        hw = self.box.half_width
        if not np.allclose(hw, hw[0], rtol=1e-12, atol=0):
            raise ValueError("grid spacing must be identical on all axes (cubic box)")

    @property
    def n(self) -> int:
        return self.box.n

    @property
    def N(self) -> int:
        return self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def size(self) -> int:
        return self.N**self.n

    @property
    def spacing(self) -> float:
        return 2.0 * self.box.half_width[0] / self.N

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.n

    @property
    def origin(self) -> np.ndarray:
        """Lower corner of the box."""
        return self.box.lower

    def axis_centers(self) -> np.ndarray:
        """Cell-centre coordinates along each axis, shape (n, N)."""
        k = np.arange(self.N) + 0.5
        return self.origin[:, None] + k[None, :] * self.spacing

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell centres in row-major order, shape (N**n, n)."""
        axes = self.axis_centers()
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def indices(self) -> np.ndarray:
        """Integer multi-indices in row-major order, shape (N**n, n)."""
        mesh = np.meshgrid(*([np.arange(self.N)] * self.n), indexing="ij")
        idx = np.stack([g.ravel() for g in mesh], axis=-1).astype(np.int64)
        idx.setflags(write=False)
        return idx

    def index_coords(self, points) -> np.ndarray:
        """Continuous index coordinates of arbitrary points (cell centres map to integers)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.origin) / self.spacing - 0.5

    def contains_ball(self, ball: Ball, padding: float = 0.0) -> bool:
        c = np.asarray(ball.center)
        lo, hi = self.box.lower, self.box.upper
        reach = ball.radius + padding
        return bool(np.all(c - reach >= lo - 1e-12) and np.all(c + reach <= hi + 1e-12))

    def require_ball(self, ball: Ball, padding: float = 0.0, what: str = "ball") -> None:
        if not self.contains_ball(ball, padding):
            need = np.maximum(
                np.abs(np.asarray(ball.center) - np.asarray(self.box.center)) + ball.radius + padding,
                0.0,
            ).max()
            raise PaddingError(
                f"{what} B({list(ball.center)}, {ball.radius}) with padding {padding} does not fit "
                f"the master box (half width {self.box.half_width[0]}); need half width >= {need:.6g}"
            )

    def header(self) -> str:
        parts = [str(self.n), str(self.N)]
        parts += [repr(c) for c in self.box.center]
        parts += [repr(h) for h in self.box.half_width]
        return " ".join(parts)

    @classmethod
    def from_header(cls, line: str) -> "GridSpec":
        tok = line.split()
        n, N = int(tok[0]), int(tok[1])
        center = [float(t) for t in tok[2 : 2 + n]]
        hw = [float(t) for t in tok[2 + n : 2 + 2 * n]]
        return cls(Box(center, hw), N)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "points_per_axis": self.N,
            "center": list(self.box.center),
            "half_width": list(self.box.half_width),
            "spacing": self.spacing,
        }


def grid_covering(
    balls: Iterable[Ball],
    spacing: float,
    padding: float,
    anchor: Sequence[float] | None = None,
) -> GridSpec:
    """Smallest cubic grid of the given spacing covering every ball plus padding.

    Cell boundaries are aligned with ``anchor`` (defaults to the first ball's
    centre), so a ball centred there is split symmetrically by the grid.
    """
    balls = list(balls)
    if not balls:
        raise ValueError("need at least one ball")
    n = balls[0].n
    lo = np.min([np.asarray(b.center) - b.radius - padding for b in balls], axis=0)
    hi = np.max([np.asarray(b.center) + b.radius + padding for b in balls], axis=0)
    anchor = np.asarray(balls[0].center if anchor is None else anchor, dtype=float)
    k_lo = np.floor((lo - anchor) / spacing + 1e-9)
    k_hi = np.ceil((hi - anchor) / spacing - 1e-9)
    N = int(max(np.max(k_hi - k_lo), MIN_POINTS))
    lower = anchor + k_lo * spacing
    # widen the short axes upward so the box stays cubic
    hw = N * spacing / 2.0
    center = lower + hw
    spec = GridSpec(Box(center, [hw] * n), N)
    return spec


@dataclass(frozen=True, eq=False)
class GridFn:
    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.size != self.spec.size:
            raise ValueError(f"expected {self.spec.size} values, got {vals.size}")
        vals = vals.reshape(self.spec.shape)
        bad = ~np.isfinite(vals)
        if bad.any():
            where = np.argwhere(bad)[0]
            raise ValueError(f"non-finite value at cell {tuple(int(w) for w in where)}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    # flat row-major view used by the operators
    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def support(self) -> np.ndarray:
        """Flat indices of nonzero cells, in row-major order."""
        return np.flatnonzero(self.flat)

    def _check(self, other: "GridFn") -> None:
        if other.spec != self.spec:
            raise PreconditionError("grid functions live on different grids")

    def _combine(self, other, op):
        if isinstance(other, GridFn):
            self._check(other)
            return GridFn(self.spec, op(self.values, other.values))
        return GridFn(self.spec, op(self.values, float(other)))

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __rsub__(self, other):
        return self._combine(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, GridFn):
            raise TypeError("division by a grid function is not supported")
        return GridFn(self.spec, self.values / float(other))

    def __neg__(self):
        return GridFn(self.spec, -self.values)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFn":
        return GridFn(self.spec, fn(self.values))

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(self.spec.header() + "\n")
        for v in self.flat.tolist():
            buf.write(repr(v) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "GridFn":
        lines = text.strip().splitlines()
        spec = GridSpec.from_header(lines[0])
        return cls(spec, np.array([float(v) for v in lines[1:]]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow([f"x{k + 1}" for k in range(self.spec.n)] + ["value"])
        for pt, v in zip(self.spec.centers.tolist(), self.flat.tolist()):
            writer.writerow([repr(c) for c in pt] + [repr(v)])
        return buf.getvalue()


def zeros(spec: GridSpec) -> GridFn:
    return GridFn(spec, np.zeros(spec.shape))


def make_grid_fn(spec: GridSpec, sampler: Callable) -> GridFn:
    """Sample ``sampler`` at every cell centre.

    The sampler receives an array of points of shape ``(N**n, n)`` and may
    return one value per point; scalar-only callables are vectorised
    automatically.
    """
    pts = spec.centers
    try:
        vals = np.asarray(sampler(pts), dtype=float)
        if vals.size != pts.shape[0] or vals.ndim == 0:
            raise TypeError
        vals = vals.ravel()
    except (TypeError, ValueError):
        vals = np.array([float(sampler(p if spec.n > 1 else p[0])) for p in pts])
    bad = ~np.isfinite(vals)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"sampler returned {vals[k]} at cell {tuple(int(i) for i in spec.indices[k])} "
            f"(centre {tuple(float(c) for c in pts[k])})"
        )
    return GridFn(spec, vals)


def integrate(f: GridFn) -> float:
    """Midpoint rule: sum of samples times the cell volume."""
    return fsum(f.flat) * f.spec.cell_volume


def inner(f: GridFn, g: GridFn) -> float:
    f._check(g)
    return fsum(f.flat * g.flat) * f.spec.cell_volume


def lp_norm(f: GridFn, p: float) -> float:
    p = float(p)
    if math.isinf(p):
        return float(np.max(np.abs(f.flat))) if f.flat.size else 0.0
    if not p >= 1:
        raise ValueError(f"lp_norm needs p >= 1, got {p}")
    a = np.abs(f.flat)
    if p == 1:
        return fsum(a) * f.spec.cell_volume
    top = a.max()
    if top == 0:
        return 0.0
    # scaled to avoid overflow for large p
    return top * (fsum((a / top) ** p) * f.spec.cell_volume) ** (1.0 / p)


def ball_mask(ball: Ball, spec: GridSpec) -> np.ndarray:
    """Boolean row-major mask of the cell centres inside the closed ball."""
    if ball.n != spec.n:
        raise ValueError("ball and grid differ in dimension")
    d2 = np.sum((spec.centers - np.asarray(ball.center)) ** 2, axis=1)
    return d2 <= ball.radius**2


def ball_indicator(ball: Ball, spec: GridSpec) -> GridFn:
    """Sharp indicator of ``ball`` sampled at cell centres.

    An empty intersection yields the zero function and a
    :class:`ResolutionWarning`.
    """
    mask = ball_mask(ball, spec)
    if not mask.any():
        warnings.warn(
            f"ball B({list(ball.center)}, {ball.radius}) contains no cell centre",
            ResolutionWarning,
            stacklevel=2,
        )
    return GridFn(spec, mask.astype(float))


def cells_across(ball: Ball, spec: GridSpec) -> float:
    return 2.0 * ball.radius / spec.spacing
