"""Discrete m-linear operators on a master grid.

``T(f_1, ..., f_m)(x) = sum K(x, y_1, ..., y_m) prod f_s(y_s) dy``, with the
sum running over cell centres in the operand supports.  The partial adjoint,
the commutator ``[b, T]_l`` and the bilinear form ``Pi_l`` reuse the same
tuple sum, so the duality

    <b, Pi_l(g, h)> = <g, [b, T]_l(h)>

and the cancellation ``integrate(Pi_l(g, h)) = 0`` hold up to rounding on any
master grid: both sides reindex one finite tensor sum.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _tensor
from .errors import CoverageWarning, PreconditionError
from .grid import GridFn, GridSpec, inner, integrate, lp_norm
from .kernels import KernelDescriptor, evaluate


@dataclass(frozen=True)
class OperatorConfig:
    kernel: KernelDescriptor
    eval_mesh: GridSpec
    exclusion_radius: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.kernel.n != self.eval_mesh.n:
            raise PreconditionError("kernel dimension differs from the grid dimension")
        if self.exclusion_radius is None:
            object.__setattr__(self, "exclusion_radius", self.eval_mesh.spacing)
        if self.exclusion_radius < 0.5 * self.eval_mesh.spacing:
            raise PreconditionError("exclusion radius must be at least half a grid spacing")
        if int(self.workers) < 1:
            raise PreconditionError("workers must be >= 1")

    @property
    def delta(self) -> float:
        return float(self.exclusion_radius)

    @property
    def m(self) -> int:
        return self.kernel.m

    def with_workers(self, workers: int) -> "OperatorConfig":
        return OperatorConfig(self.kernel, self.eval_mesh, self.exclusion_radius, workers)


@dataclass
class OperatorStats:
    """Counters filled in by operator calls when passed as ``stats=``."""

    calls: int = 0
    excluded_tuples: int = 0
    uncovered_points: int = 0
    notes: list = field(default_factory=list)

    @property
    def exclusion_fired(self) -> bool:
        return self.excluded_tuples > 0


def _operands(cfg: OperatorConfig, fs: Sequence[GridFn]):
    fs = list(fs)
    if len(fs) != cfg.m:
        raise PreconditionError(f"operator is {cfg.m}-linear, got {len(fs)} operands")
    spec = cfg.eval_mesh
    for f in fs:
        if f.spec != spec:
            raise PreconditionError("operand grid differs from the master grid")
    vol = spec.cell_volume
    ys_p, ys_q, ys_w = [], [], []
    for f in fs:
        idx = f.support()
        ys_p.append(np.ascontiguousarray(spec.centers[idx]))
        ys_q.append(np.ascontiguousarray(spec.indices[idx], dtype=float))
        ys_w.append(np.ascontiguousarray(f.flat[idx] * vol))
    return ys_p, ys_q, ys_w


def _bbox(q: np.ndarray):
    return q.min(axis=0), q.max(axis=0)


def _needs_check(xq: np.ndarray, ys_q: list, thr2: float) -> bool:
    """False when every pair of point sets is provably farther apart than the threshold."""
    boxes = [_bbox(xq)] + [_bbox(q) for q in ys_q]
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            lo_a, hi_a = boxes[a]
            lo_b, hi_b = boxes[b]
            gap = np.maximum(0.0, np.maximum(lo_a - hi_b, lo_b - hi_a))
            if float(np.sum(gap**2)) < thr2:
                return True
    return False


def _chunks(E: int, workers: int) -> list[tuple[int, int]]:
    if workers <= 1 or E < 2 * workers:
        return [(0, E)]
    bounds = np.linspace(0, E, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _tensor_sum(cfg: OperatorConfig, fs, xp, xq, swap: int, stats: OperatorStats | None):
    k = cfg.kernel
    ys_p, ys_q, ys_w = _operands(cfg, fs)
    E = xp.shape[0]
    out = np.zeros(E)
    covered = np.ones(E, dtype=bool)
    excluded = np.zeros(E, dtype=np.int64)
    if E == 0 or min(len(w) for w in ys_w) == 0:
        return out
    thr2 = (cfg.delta / cfg.eval_mesh.spacing) ** 2
    check = _needs_check(xq, ys_q, thr2)
    if k.family == "riesz":
        yp = np.concatenate(ys_p)
        yq = np.concatenate(ys_q)
        yw = np.concatenate(ys_w)
        offsets = np.concatenate([[0], np.cumsum([len(w) for w in ys_w])]).astype(np.int64)

        def run(lo, hi):
            _tensor.riesz_tensor_sum(
                xp[lo:hi], xq[lo:hi], yp, yq, yw, offsets, k.m, k.n, k.j, k.i - 1,
                swap, thr2, check, out[lo:hi], covered[lo:hi], excluded[lo:hi],
            )
    else:

        def kernel_fn(y0, ys):
            return evaluate(k, y0, ys)

        def run(lo, hi):
            o, c, x = _tensor.numpy_tensor_sum(
                kernel_fn, xp[lo:hi], xq[lo:hi], ys_p, ys_q, ys_w, swap, thr2, check
            )
            out[lo:hi], covered[lo:hi], excluded[lo:hi] = o, c, x

    chunks = _chunks(E, cfg.workers)
    if len(chunks) == 1:
        run(*chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(lambda c: run(*c), chunks))
    uncovered = int((~covered).sum())
    if stats is not None:
        stats.calls += 1
        stats.excluded_tuples += int(excluded.sum())
        stats.uncovered_points += uncovered
    if uncovered:
        warnings.warn(
            f"{uncovered} evaluation point(s) had every quadrature tuple excluded; value set to 0",
            CoverageWarning,
            stacklevel=3,
        )
    return out


def evaluate_at(
    cfg: OperatorConfig,
    fs: Sequence[GridFn],
    at: np.ndarray,
    swap: int = 0,
    stats: OperatorStats | None = None,
) -> np.ndarray:
    """Tuple sums at the grid cells with flat indices ``at``.

    ``swap=0`` gives T, ``swap=l`` the l-th partial adjoint.
    """
    if not 0 <= swap <= cfg.m:
        raise PreconditionError(f"slot {swap} outside [1, {cfg.m}]")
    spec = cfg.eval_mesh
    at = np.asarray(at, dtype=np.int64)
    xp = np.ascontiguousarray(spec.centers[at])
    xq = np.ascontiguousarray(spec.indices[at], dtype=float)
    return _tensor_sum(cfg, fs, xp, xq, swap, stats)


def evaluate_points(
    cfg: OperatorConfig,
    fs: Sequence[GridFn],
    points,
    swap: int = 0,
    stats: OperatorStats | None = None,
) -> np.ndarray:
    """Tuple sums at arbitrary points (used for scalar quantities such as denominators)."""
    spec = cfg.eval_mesh
    xp = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, spec.n))
    xq = np.ascontiguousarray(spec.index_coords(xp))
    return _tensor_sum(cfg, fs, xp, xq, swap, stats)


def _full(cfg: OperatorConfig, fs, swap, stats) -> GridFn:
    spec = cfg.eval_mesh
    vals = evaluate_at(cfg, fs, np.arange(spec.size), swap, stats)
    return GridFn(spec, vals)


def apply_T(cfg: OperatorConfig, fs: Sequence[GridFn], stats: OperatorStats | None = None) -> GridFn:
    return _full(cfg, fs, 0, stats)


def apply_partial_adjoint(
    cfg: OperatorConfig, l: int, fs: Sequence[GridFn], stats: OperatorStats | None = None
) -> GridFn:
    """The l-th partial adjoint: kernel arguments ``(y_l, y_1, .., x, .., y_m)``."""
    if not 1 <= l <= cfg.m:
        raise PreconditionError(f"slot {l} outside [1, {cfg.m}]")
    return _full(cfg, fs, l, stats)


def _slot(l: int, m: int) -> None:
    if not 1 <= l <= m:
        raise PreconditionError(f"slot {l} outside [1, {m}]")


def commutator_apply(
    cfg: OperatorConfig,
    l: int,
    b: GridFn,
    fs: Sequence[GridFn],
    at: np.ndarray | None = None,
    stats: OperatorStats | None = None,
) -> GridFn:
    """``[b, T]_l(f) = T(f_1, .., b f_l, .., f_m) - b T(f)``.

    When ``at`` is given only those cells are evaluated; the rest are 0.
    """
    _slot(l, cfg.m)
    fs = list(fs)
    spec = cfg.eval_mesh
    if b.spec != spec:
        raise PreconditionError("b lives on a different grid")
    at = np.arange(spec.size) if at is None else np.asarray(at, dtype=np.int64)
    weighted = fs.copy()
    weighted[l - 1] = b * fs[l - 1]
    first = evaluate_at(cfg, weighted, at, 0, stats)
    second = evaluate_at(cfg, fs, at, 0, stats)
    vals = np.zeros(spec.size)
    vals[at] = first - b.flat[at] * second
    return GridFn(spec, vals)


def pi_apply(
    cfg: OperatorConfig,
    l: int,
    g: GridFn,
    hs: Sequence[GridFn],
    stats: OperatorStats | None = None,
) -> GridFn:
    """``Pi_l(g, h) = h_l T_l*(h_1, .., g, .., h_m) - g T(h_1, .., h_m)``.

    Each term is evaluated only where its multiplier is nonzero.
    """
    _slot(l, cfg.m)
    hs = list(hs)
    spec = cfg.eval_mesh
    if g.spec != spec:
        raise PreconditionError("g lives on a different grid")
    swapped = hs.copy()
    swapped[l - 1] = g
    hl = hs[l - 1]
    at1 = hl.support()
    at2 = g.support()
    v1 = evaluate_at(cfg, swapped, at1, l, stats)
    v2 = evaluate_at(cfg, hs, at2, 0, stats)
    vals = np.zeros(spec.size)
    vals[at1] += hl.flat[at1] * v1
    vals[at2] -= g.flat[at2] * v2
    return GridFn(spec, vals)


def duality_defect(
    cfg: OperatorConfig,
    l: int,
    b: GridFn,
    g: GridFn,
    hs: Sequence[GridFn],
    stats: OperatorStats | None = None,
) -> dict:
    """Defects of ``<b, Pi_l(g, h)> = <g, [b,T]_l(h)>`` and ``integrate(Pi_l) = 0``.

    ``scale`` is the product of the L2 norms of ``b``, ``g`` and every ``h_j``.
    """
    pi = pi_apply(cfg, l, g, hs, stats=stats)
    com = commutator_apply(cfg, l, b, hs, at=g.support(), stats=stats)
    lhs = inner(b, pi)
    rhs = inner(g, com)
    scale = lp_norm(b, 2) * lp_norm(g, 2)
    for h in hs:
        scale *= lp_norm(h, 2)
    return {
        "pairing": abs(lhs - rhs),
        "cancellation": abs(integrate(pi)),
        "scale": scale,
        "lhs": lhs,
        "rhs": rhs,
    }
