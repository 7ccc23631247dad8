"""Multilinear Riesz kernels and numerical checks of the Calderon-Zygmund conditions.

A kernel is evaluated on an (m+1)-tuple ``(y0, y1, ..., ym)`` of points of
R^n.  For the Riesz family with distinguished slot ``j`` and component ``i``::

    K(y0, y1, ..., ym) = (y0 - yj)[i] / |(y0 - y1, ..., y0 - ym)|^(mn+1)

The verifiers measure the size constant ``A`` and the regularity ratio by
sampling, using the ordered pair sum ``S = sum_{k,l} |yk - yl|`` (every
unordered pair counted twice).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import PreconditionError, ResolutionError, SingularityError
from .grid import Ball, GridSpec, cells_across

MIN_CELLS_ACROSS = 8


@dataclass(frozen=True)
class KernelDescriptor:
    """Identifies an m-linear kernel on R^n.

    ``custom_eval(y0, ys)`` receives broadcastable arrays of shape ``(..., n)``
    (``ys`` is a list of m of them) and must return an array of shape
    ``(...)``.  It is only consulted when ``family == "custom"``.
    """

    family: str = "riesz"
    m: int = 1
    n: int = 1
    j: int = 1
    i: int = 1
    A: float = 1.0
    eps: float = 1.0
    custom_eval: Callable | None = field(default=None, compare=False, repr=False)
    name: str | None = None

    def __post_init__(self):
        if self.family not in ("riesz", "custom"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not 1 <= self.j <= self.m:
            raise ValueError(f"slot j={self.j} outside [1, {self.m}]")
        if not 1 <= self.i <= self.n:
            raise ValueError(f"component i={self.i} outside [1, {self.n}]")
        if not self.A > 0:
            raise ValueError("size constant A must be positive")
        if not 0 < self.eps <= 1:
            raise ValueError("regularity exponent must lie in (0, 1]")
        if self.family == "riesz" and self.eps != 1.0:
            raise ValueError("the Riesz family is Lipschitz: eps must be 1")
        if self.family == "custom" and self.custom_eval is None:
            raise ValueError("custom kernels need custom_eval")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.family == "riesz":
            return f"riesz(m={self.m},n={self.n},j={self.j},i={self.i})"
        return f"custom(m={self.m},n={self.n})"

    def negated(self) -> "KernelDescriptor":
        """The same kernel multiplied by -1 (as a custom kernel)."""
        base = self

        def neg(y0, ys):
            return -evaluate(base, y0, ys)

        return KernelDescriptor(
            "custom", self.m, self.n, self.j, self.i, self.A, self.eps, neg, name=f"-{self.label}"
        )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "label": self.label,
            "m": self.m,
            "n": self.n,
            "j": self.j,
            "i": self.i,
            "A": self.A,
            "eps": self.eps,
        }


def riesz(m: int = 1, n: int = 1, j: int = 1, i: int = 1) -> KernelDescriptor:
    return KernelDescriptor("riesz", m, n, j, i)


def evaluate(k: KernelDescriptor, y0, ys: Sequence) -> np.ndarray:
    """Vectorised kernel values; NaN where the tuple lies on the full diagonal."""
    y0 = np.asarray(y0, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in ys]
    if len(ys) != k.m:
        raise ValueError(f"kernel is {k.m}-linear, got {len(ys)} arguments")
    if k.family == "custom":
        return np.asarray(k.custom_eval(y0, ys), dtype=float)
    sq = sum(np.sum((y0 - y) ** 2, axis=-1) for y in ys)
    num = (y0 - ys[k.j - 1])[..., k.i - 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / sq ** ((k.m * k.n + 1) / 2.0)
    return np.where(sq > 0, out, np.nan)


def eval_kernel(k: KernelDescriptor, x, ys: Sequence) -> float:
    x = np.asarray(x, dtype=float).reshape(k.n)
    ys = [np.asarray(y, dtype=float).reshape(k.n) for y in ys]
    if all(np.array_equal(x, y) for y in ys):
        raise SingularityError(f"kernel evaluated on the diagonal at {x.tolist()}")
    val = float(evaluate(k, x, ys))
    if not math.isfinite(val):
        raise SingularityError(f"kernel is singular at {x.tolist()}, {[y.tolist() for y in ys]}")
    return val


def pair_sum(tuples: np.ndarray) -> np.ndarray:
    """Ordered pair sum over the last-but-one axis of ``(..., m+1, n)`` arrays."""
    t = np.asarray(tuples, dtype=float)
    diff = t[..., :, None, :] - t[..., None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1)).sum(axis=(-1, -2))


class CheckResult(NamedTuple):
    value: float
    evaluated: int
    skipped: int


def _as_tuples(k: KernelDescriptor, samples) -> np.ndarray:
    t = np.asarray(samples, dtype=float)
    if t.ndim == 2 and k.n == 1:
        t = t[..., None]
    if t.ndim != 3 or t.shape[1:] != (k.m + 1, k.n):
        raise ValueError(f"sample tuples must have shape (S, {k.m + 1}, {k.n}), got {t.shape}")
    return t


def _kernel_on_tuples(k: KernelDescriptor, t: np.ndarray) -> np.ndarray:
    return evaluate(k, t[:, 0, :], [t[:, s, :] for s in range(1, k.m + 1)])


def kernel_size_check(k: KernelDescriptor, sample_tuples) -> CheckResult:
    """Largest observed ``|K| * S^(mn)``; diagonal tuples are skipped and counted."""
    t = _as_tuples(k, sample_tuples)
    S = pair_sum(t)
    ok = S > 0
    vals = np.abs(_kernel_on_tuples(k, t[ok])) * S[ok] ** (k.m * k.n)
    vals = vals[np.isfinite(vals)]
    skipped = int(t.shape[0] - vals.size)
    return CheckResult(float(vals.max()) if vals.size else 0.0, int(vals.size), skipped)


class RegularitySamples(NamedTuple):
    tuples: np.ndarray  # (S, m+1, n)
    slots: np.ndarray  # (S,) in [0, m]
    displaced: np.ndarray  # (S, n)


def _as_regularity(k: KernelDescriptor, samples) -> RegularitySamples:
    if isinstance(samples, RegularitySamples):
        t, s, d = samples
    else:
        samples = list(samples)
        t = [x[0] for x in samples]
        s = [x[1] for x in samples]
        d = [x[2] for x in samples]
    t = _as_tuples(k, t)
    s = np.asarray(s, dtype=np.int64)
    d = np.asarray(d, dtype=float).reshape(t.shape[0], k.n)
    if np.any((s < 0) | (s > k.m)):
        raise ValueError("regularity slot outside [0, m]")
    return RegularitySamples(t, s, d)


def kernel_regularity_check(k: KernelDescriptor, sample_pairs) -> CheckResult:
    """Largest observed ``|K(..yj..) - K(..yj'..)| * S^(mn+eps) / |yj - yj'|^eps``.

    Samples whose displacement exceeds half the largest distance from ``yj``
    to the other points are rejected (counted in ``skipped``).
    """
    t, slots, disp = _as_regularity(k, sample_pairs)
    rows = np.arange(t.shape[0])
    yj = t[rows, slots]
    step = np.sqrt(np.sum((disp - yj) ** 2, axis=-1))
    reach = np.sqrt(np.sum((t - yj[:, None, :]) ** 2, axis=-1)).max(axis=1)
    S = pair_sum(t)
    ok = (step <= 0.5 * reach * (1 + 1e-12)) & (S > 0)
    moved = t.copy()
    moved[rows, slots] = disp
    K0 = _kernel_on_tuples(k, t)
    K1 = _kernel_on_tuples(k, moved)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(K0 - K1) * S ** (k.m * k.n + k.eps) / step**k.eps
    ratio = np.where(step == 0, 0.0, ratio)
    good = ok & np.isfinite(ratio)
    vals = ratio[good]
    return CheckResult(float(vals.max()) if vals.size else 0.0, int(vals.size), int((~good).sum()))


def random_tuples(k: KernelDescriptor, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, k.m + 1, k.n))


def random_regularity_samples(k: KernelDescriptor, count: int, seed: int) -> RegularitySamples:
    """Gaussian tuples, a uniform slot, and an admissible displacement of that slot."""
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((count, k.m + 1, k.n))
    slots = rng.integers(0, k.m + 1, size=count)
    rows = np.arange(count)
    yj = t[rows, slots]
    reach = np.sqrt(np.sum((t - yj[:, None, :]) ** 2, axis=-1)).max(axis=1)
    direction = rng.standard_normal((count, k.n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    size = 0.5 * reach * rng.uniform(0.0, 1.0, size=count)
    return RegularitySamples(t, slots, yj + direction * size[:, None])


def identity_defects(k: KernelDescriptor, count: int, seed: int) -> dict:
    """Largest defects of the scaling, translation and oddness identities.

    Each defect is measured in units of the natural kernel size
    ``|(y0 - y1, ..., y0 - ym)|^-(mn)`` of the tuple.  The unit-variance
    tuples keep every ``|y0 - ys| >= 0.05``, so rounding of the transformed
    inputs is not amplified by a near-diagonal difference.
    """
    rng = np.random.default_rng(seed)
    kept = []
    while sum(len(c) for c in kept) < count:
        c = rng.standard_normal((2 * count, k.m + 1, k.n))
        d = np.sqrt(np.sum((c[:, :1] - c[:, 1:]) ** 2, axis=2))
        kept.append(c[d.min(axis=1) >= 0.05])
    t = np.concatenate(kept)[:count]
    s = rng.uniform(0.5, 4.0, size=count)
    v = 2.0 * rng.standard_normal((count, 1, k.n))
    mn = k.m * k.n
    base = _kernel_on_tuples(k, t)
    unit = np.sqrt(np.sum((t[:, :1] - t[:, 1:]) ** 2, axis=(1, 2))) ** -mn
    scaled = _kernel_on_tuples(k, t * s[:, None, None]) * s**mn
    moved = _kernel_on_tuples(k, t + v)
    flipped = -_kernel_on_tuples(k, -t)
    return {
        "scaling": float(np.max(np.abs(scaled - base) / unit)),
        "translation": float(np.max(np.abs(moved - base) / unit)),
        "antisymmetry": float(np.max(np.abs(flipped - base) / unit)),
    }


def verifier_report(k: KernelDescriptor, samples: int, seed: int) -> dict:
    size = kernel_size_check(k, random_tuples(k, samples, seed))
    reg = kernel_regularity_check(k, random_regularity_samples(k, samples, seed))
    return {
        "kernel": k.to_dict(),
        "samples": samples,
        "measured_A": size.value,
        "measured_ratio": reg.value,
        "skipped": {"size": size.skipped, "regularity": reg.skipped},
        "seed": seed,
    }


def verifier_report_json(k: KernelDescriptor, samples: int, seed: int) -> str:
    return json.dumps(verifier_report(k, samples, seed), indent=2, sort_keys=True)


def ray_centers(x0, separation: float, m: int, l: int) -> list[np.ndarray]:
    """Centres ``x0 + k * separation * u`` for the m slots, slot ``l`` at ``k = 1``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    u = np.ones(x0.size) / math.sqrt(x0.size)
    order = [l] + [s for s in range(1, m + 1) if s != l]
    mult = [0] * m
    for k, slot in enumerate(order, start=1):
        mult[slot - 1] = k
    return [x0 + k * separation * u for k in mult]


@dataclass(frozen=True)
class HomogeneityGeometry:
    """Ball placement for the nondegeneracy lower bound.

    Centres sit on the ray ``x0 + t * u`` with ``u = (1, ..., 1)/sqrt(n)`` at
    ``t = k * M * r`` for ``k = 1..m``; the distinguished slot ``l`` takes
    ``k = 1`` and the remaining slots take ``k = 2..m`` in order.
    """

    r: float
    M: float
    x0: tuple[float, ...]
    m: int = 1
    l: int = 1

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        if not self.r > 0:
            raise PreconditionError("radius must be positive")
        if not self.M > 10:
            raise PreconditionError(f"separation multiplier M must exceed 10, got {self.M}")
        if not 1 <= self.l <= self.m:
            raise PreconditionError(f"slot l={self.l} outside [1, {self.m}]")

    @property
    def n(self) -> int:
        return len(self.x0)

    @property
    def direction(self) -> np.ndarray:
        return np.ones(self.n) / math.sqrt(self.n)

    @property
    def centers(self) -> list[np.ndarray]:
        return ray_centers(self.x0, self.M * self.r, self.m, self.l)

    @property
    def base_ball(self) -> Ball:
        return Ball(self.x0, self.r)

    @property
    def balls(self) -> list[Ball]:
        return [Ball(c, self.r) for c in self.centers]


def check_resolved(ball: Ball, spec: GridSpec, what: str = "ball") -> None:
    cells = cells_across(ball, spec)
    if cells < MIN_CELLS_ACROSS:
        raise ResolutionError(
            f"{what} of radius {ball.radius} spans {cells:.3g} cells; need >= {MIN_CELLS_ACROSS}"
        )


def homogeneity_profile(
    k: KernelDescriptor,
    geom: HomogeneityGeometry,
    spec: GridSpec,
    adjoint: bool = False,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Values of ``T(chi_B1, ..., chi_Bm)`` at the cell centres inside ``B0``.

    With ``adjoint=True`` the l-th partial adjoint is used instead, which is
    the quantity appearing in the factorization denominator.
    """
    from .grid import ball_indicator, ball_mask
    from .operators import OperatorConfig, evaluate_at

    if k.m != geom.m or k.n != geom.n:
        raise PreconditionError("kernel and geometry disagree on m or n")
    for b in [geom.base_ball] + geom.balls:
        check_resolved(b, spec)
        spec.require_ball(b, padding=geom.r, what="homogeneity ball")
    cfg = OperatorConfig(k, spec, workers=workers)
    fs = [ball_indicator(b, spec) for b in geom.balls]
    at = np.flatnonzero(ball_mask(geom.base_ball, spec))
    vals = evaluate_at(cfg, fs, at, swap=geom.l if adjoint else 0)
    return spec.centers[at], vals


def homogeneity_measure(
    k: KernelDescriptor,
    geom: HomogeneityGeometry,
    spec: GridSpec,
    adjoint: bool = False,
    workers: int = 1,
) -> float:
    """``M^(mn) * min_{x in B0} |T(chi_B1, ..., chi_Bm)(x)|`` over cell centres."""
    _, vals = homogeneity_profile(k, geom, spec, adjoint=adjoint, workers=workers)
    return float(geom.M ** (k.m * k.n) * np.min(np.abs(vals)))
