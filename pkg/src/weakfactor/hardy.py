"""H1 atoms, a constructive two-bump decomposition, and H1 / BMO estimators.

All norms here are *estimates* with unknown absolute constants.  Tests and
reports compare them across parameter sweeps, never against fixed values.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from . import _tensor
from .errors import CancellationWarning, PreconditionError, ResolutionError
from .grid import (
    Ball,
    GridFn,
    GridSpec,
    ball_indicator,
    ball_mask,
    fsum,
    inner,
    integrate,
    lp_norm,
)
from .kernels import MIN_CELLS_ACROSS, check_resolved, ray_centers
from .operators import OperatorConfig, OperatorStats, commutator_apply

SUPPORT_TOL = 1e-9
LINF_TOL = 1e-6
MEAN_TOL = 1e-8


# ---------------------------------------------------------------- atoms


@dataclass(frozen=True, eq=False)
class HAtom:
    """Mean-zero function supported in ``ball`` with sup norm at most ``r^-n``."""

    ball: Ball
    fn: GridFn

    def __post_init__(self):
        problems = atom_violations(self.ball, self.fn)
        if problems:
            raise PreconditionError("invalid atom: " + "; ".join(problems))

    @property
    def radius(self) -> float:
        return self.ball.radius

    @property
    def spec(self) -> GridSpec:
        return self.fn.spec


def atom_violations(ball: Ball, fn: GridFn) -> list[str]:
    """Human-readable list of broken atom invariants (empty when valid)."""
    spec = fn.spec
    out = []
    r, n = ball.radius, spec.n
    idx = fn.support()
    if idx.size:
        d2 = np.sum((spec.centers[idx] - np.asarray(ball.center)) ** 2, axis=1)
        if np.any(d2 > (r * (1 + SUPPORT_TOL)) ** 2):
            out.append("nonzero samples outside the ball")
    top = lp_norm(fn, math.inf)
    if top > (1 + LINF_TOL) * r**-n:
        out.append(f"sup norm {top:.6g} exceeds r^-n = {r**-n:.6g}")
    mean = integrate(fn)
    if abs(mean) > MEAN_TOL * r**-n * ball.volume():
        out.append(f"integral {mean:.3g} is not zero")
    return out


def _dipole(pts: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    n = pts.shape[1]
    return 0.5 * r**-n * np.sign(pts[:, 0] - c[0])


def _haar_like(pts: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    n = pts.shape[1]
    return r**-n * np.prod(np.sign(pts - c), axis=1)


PROFILES: dict[str, Callable] = {"dipole": _dipole, "haar_like": _haar_like}


def make_atom(ball: Ball, spec: GridSpec, profile: str | Callable = "dipole") -> HAtom:
    """Sample an atom on ``ball``.

    ``profile`` is ``"dipole"``, ``"haar_like"`` or a sampler taking an
    ``(K, n)`` array of points.  Samples are restricted to the ball and then
    mean-corrected; a custom sampler above the sup bound is rejected.
    """
    check_resolved(ball, spec, "atom ball")
    mask = ball_mask(ball, spec)
    if not mask.any():
        raise ResolutionError("atom ball contains no cell centre")
    pts = spec.centers[mask]
    c = np.asarray(ball.center)
    r, n = ball.radius, spec.n
    bound = r**-n
    if callable(profile):
        vals = np.asarray(profile(pts), dtype=float).ravel()
        if vals.size != pts.shape[0]:
            raise PreconditionError("custom sampler returned the wrong number of values")
        if np.max(np.abs(vals)) > (1 + LINF_TOL) * bound:
            raise PreconditionError(
                f"custom sampler reaches {np.max(np.abs(vals)):.6g}, above the atom bound {bound:.6g}"
            )
    else:
        try:
            vals = PROFILES[profile](pts, c, r)
        except KeyError:
            raise PreconditionError(f"unknown atom profile {profile!r}") from None
    vals = vals - fsum(vals) / vals.size
    top = np.max(np.abs(vals))
    if top > bound:
        vals = vals * (bound / top)
    full = np.zeros(spec.size)
    full[mask] = vals
    return HAtom(ball, GridFn(spec, full))


def normalize(g: GridFn, ball: Ball, zero_below: float = 0.0) -> tuple[float, HAtom]:
    """Split ``g`` into ``lambda * atom`` with ``lambda = |g|_inf * radius^n``.

    Functions whose sup norm is at most ``zero_below`` become a zero atom
    with ``lambda = 0``.
    """
    top = lp_norm(g, math.inf)
    if top <= zero_below:
        return 0.0, HAtom(ball, GridFn(g.spec, np.zeros(g.spec.size)))
    lam = top * ball.radius**g.spec.n
    return lam, HAtom(ball, g / lam)


# ---------------------------------------------------------------- two bumps


@dataclass(frozen=True, eq=False)
class TwoBump:
    """Mean-zero ``fn`` dominated by ``A0`` times the indicators of ``B(x0, r)`` and ``B(y0, r)``."""

    fn: GridFn
    x0: tuple[float, ...]
    y0: tuple[float, ...]
    r: float
    amplitude: float

    def __post_init__(self):
        n = self.fn.spec.n
        x0 = tuple(float(v) for v in np.atleast_1d(self.x0))
        y0 = tuple(float(v) for v in np.atleast_1d(self.y0))
        if len(x0) != n or len(y0) != n:
            raise PreconditionError("bump centres have the wrong dimension")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "y0", y0)
        if not self.r > 0 or not self.amplitude >= 0:
            raise PreconditionError("radius must be positive and amplitude non-negative")
        if not self.separation > 10 * self.r:
            raise PreconditionError(
                f"bump separation {self.separation:.6g} must exceed 10 r = {10 * self.r:.6g}"
            )
        spec = self.fn.spec
        env = self.amplitude * (
            ball_mask(Ball(x0, self.r), spec).astype(float) + ball_mask(Ball(y0, self.r), spec)
        )
        excess = np.abs(self.fn.flat) - env
        if np.any(excess > 1e-12 * max(self.amplitude, 1e-300)):
            raise PreconditionError("function is not dominated by the two-bump envelope")
        scale = self.amplitude * Ball(x0, self.r).volume()
        if abs(integrate(self.fn)) > 1e-9 * max(scale, 1e-300):
            raise PreconditionError(f"two-bump function has integral {integrate(self.fn):.3g}")

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(np.subtract(self.x0, self.y0)))

    @property
    def near_x(self) -> Ball:
        return Ball(self.x0, self.r)

    @property
    def near_y(self) -> Ball:
        return Ball(self.y0, self.r)


def two_bump(fn: GridFn, x0, y0, r: float) -> TwoBump:
    """Wrap ``fn`` with the smallest admissible amplitude."""
    return TwoBump(fn, x0, y0, r, lp_norm(fn, math.inf))


def chi_dipole_pair(spec: GridSpec, x0, D: float, r: float = 1.0, amplitude: float = 1.0) -> TwoBump:
    """``A0 (chi_B(x0, r) - chi_B(y0, r))`` with ``y0 = x0 + D u`` along the diagonal."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    (y0,) = ray_centers(x0, D, 1, 1)
    plus = ball_indicator(Ball(x0, r), spec)
    minus = ball_indicator(Ball(y0, r), spec)
    if plus.support().size != minus.support().size:
        raise PreconditionError("bump balls cover different cell counts; align the grid")
    return TwoBump((plus - minus) * amplitude, x0, y0, r, amplitude)


@dataclass(frozen=True)
class ChainPlan:
    """Ball geometry of the two-sided transport chain between two bumps.

    ``x_radii`` grow geometrically from ``r`` to ``D/2`` around ``x0`` and
    ``y_radii`` likewise around ``y0``; ``link`` encloses both top balls.
    Together with the two end atoms this gives ``ceil(log2(D/r)) + 2`` atoms.
    """

    x0: tuple[float, ...]
    y0: tuple[float, ...]
    x_radii: tuple[float, ...]
    y_radii: tuple[float, ...]
    link: Ball

    @property
    def x_balls(self) -> list[Ball]:
        return [Ball(self.x0, rho) for rho in self.x_radii]

    @property
    def y_balls(self) -> list[Ball]:
        return [Ball(self.y0, rho) for rho in self.y_radii]

    @property
    def atom_count(self) -> int:
        return len(self.x_radii) + len(self.y_radii) + 1

    def atom_balls(self) -> list[Ball]:
        """Containing balls in emission order."""
        xb, yb = self.x_balls, self.y_balls
        return [xb[0]] + xb[1:] + [self.link] + yb[:0:-1] + [yb[0]]


def chain_levels(D: float, r: float) -> int:
    """``ceil(log2(D / r))``, robust to exact powers of two."""
    return int(math.ceil(math.log2(D / r) - 1e-12))


def chain_plan(x0, y0, r: float) -> ChainPlan:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    D = float(np.linalg.norm(y0 - x0))
    L = chain_levels(D, r)
    kx = (L - 1 + 1) // 2
    ky = (L - 1) // 2
    top = D / 2.0

    def radii(k):
        return tuple([r] + [r * (top / r) ** (i / k) for i in range(1, k)] + [top])

    link = Ball((x0 + y0) / 2.0, D)
    return ChainPlan(tuple(x0), tuple(y0), radii(kx), radii(ky), link)


@dataclass
class AtomicDecomposition:
    """Finite sum ``sum lambda_s * a_s``."""

    terms: list[tuple[float, HAtom]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def sum_abs_lambda(self) -> float:
        return math.fsum(abs(lam) for lam, _ in self.terms)

    def total(self, spec: GridSpec | None = None) -> GridFn:
        if not self.terms:
            if spec is None:
                raise ValueError("empty decomposition needs a grid")
            return GridFn(spec, np.zeros(spec.size))
        spec = self.terms[0][1].spec
        acc = np.zeros(spec.size)
        for lam, a in self.terms:
            acc += lam * a.fn.flat
        return GridFn(spec, acc)

    def to_json(self, refs: Sequence[str]) -> str:
        items = [
            {"lambda": lam, "ball": a.ball.to_dict(), "values_ref": ref}
            for (lam, a), ref in zip(self.terms, refs, strict=True)
        ]
        return json.dumps(items, indent=2)

    def save(self, directory: str, stem: str = "atom") -> str:
        """Write one GridFn text file per atom plus ``<stem>s.json``; returns the JSON path."""
        refs = []
        for s, (_, a) in enumerate(self.terms):
            ref = f"{stem}_{s:04d}.txt"
            with open(os.path.join(directory, ref), "w", newline="\n") as fh:
                fh.write(a.fn.to_text())
            refs.append(ref)
        path = os.path.join(directory, f"{stem}s.json")
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_json(refs))
        return path

    @classmethod
    def load(cls, path: str) -> "AtomicDecomposition":
        directory = os.path.dirname(path)
        with open(path) as fh:
            items = json.load(fh)
        terms = []
        for it in items:
            with open(os.path.join(directory, it["values_ref"])) as fh:
                fn = GridFn.from_text(fh.read())
            ball = Ball(it["ball"]["center"], it["ball"]["radius"])
            terms.append((float(it["lambda"]), HAtom(ball, fn)))
        return cls(terms)


def two_bump_decompose(f: TwoBump) -> AtomicDecomposition:
    """Exact atomic decomposition along a two-sided geometric chain.

    The mass ``mu`` of the ``x0`` bump is spread over balls of growing radius
    around ``x0``, handed over to a matching ball around ``y0`` by one link
    atom, and collected back down to ``B(y0, r)``.  Every piece has mean zero
    and the pieces telescope to ``f``.  With ``mu = 0`` only the two end atoms
    are emitted.
    """
    spec = f.fn.spec
    vol = spec.cell_volume
    bx, by = f.near_x, f.near_y
    mx, my = ball_mask(bx, spec), ball_mask(by, spec)
    fx = np.where(mx, f.fn.flat, 0.0)
    fy = np.where(my, f.fn.flat, 0.0)
    mu = fsum(fx) * vol
    scale = max(f.amplitude, 1e-300)
    tiny = 1e-13 * scale

    def to_fn(v):
        return GridFn(spec, v)

    if abs(mu) <= 1e-14 * scale * bx.volume():
        terms = [normalize(to_fn(fx), bx, tiny), normalize(to_fn(fy), by, tiny)]
        return AtomicDecomposition(terms)

    plan = chain_plan(f.x0, f.y0, f.r)
    for b in plan.x_balls + plan.y_balls:
        spec.require_ball(b, 0.0, "chain ball")

    def unit_mass(ball):
        m = ball_mask(ball, spec)
        return m / (np.count_nonzero(m) * vol)

    ux = [unit_mass(b) for b in plan.x_balls]
    uy = [unit_mass(b) for b in plan.y_balls]
    tiny = 1e-13 * max(scale, abs(mu) / bx.volume())
    terms = [normalize(to_fn(fx - mu * ux[0]), bx, tiny)]
    for i in range(1, len(ux)):
        terms.append(normalize(to_fn(mu * (ux[i - 1] - ux[i])), plan.x_balls[i], tiny))
    terms.append(normalize(to_fn(mu * (ux[-1] - uy[-1])), plan.link, tiny))
    for i in range(len(uy) - 1, 0, -1):
        terms.append(normalize(to_fn(mu * (uy[i] - uy[i - 1])), plan.y_balls[i], tiny))
    terms.append(normalize(to_fn(fy + mu * uy[0]), by, tiny))
    return AtomicDecomposition(terms)


# ---------------------------------------------------------------- maximal function


def bump_norm(n: int) -> float:
    """Constant making ``c (1 - |z|^2)^2`` on the unit ball have unit mass."""
    radial = 1.0 / n - 2.0 / (n + 2) + 1.0 / (n + 4)
    sphere = 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)
    return 1.0 / (sphere * radial)


@dataclass(frozen=True)
class MaximalConfig:
    """Settings for :func:`h1_norm_estimate`.

    ``near_field`` is the distance from the support inside which the
    evaluation mesh stays at grid resolution (default ``32 * spacing``).
    ``region_factor`` sets how far, in support diameters, the mesh extends.
    Explicit ``scales`` override the automatic dyadic list.
    """

    near_field: float | None = None
    region_factor: float = 2.0
    min_scales: int = 6
    scales: tuple[float, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        if self.scales is not None:
            s = np.asarray(self.scales, dtype=float)
            if s.ndim != 1 or s.size < self.min_scales:
                raise PreconditionError(f"need at least {self.min_scales} scales")
            if np.any(np.diff(s) <= 0) or s[0] <= 0:
                raise PreconditionError("scales must be positive and strictly increasing")
            object.__setattr__(self, "scales", tuple(float(v) for v in s))


@dataclass
class MaximalMesh:
    centers: np.ndarray
    volumes: np.ndarray
    scales: np.ndarray


def maximal_mesh(f: GridFn, cfg: MaximalConfig) -> MaximalMesh:
    """Multiresolution evaluation mesh around the support of ``f``.

    Cells are refined until they reach the grid spacing inside the near field
    and stay below a quarter of their distance to the support elsewhere.  The
    root cell is aligned with the master grid so fine leaves are grid cells.
    """
    spec = f.spec
    n, h0 = spec.n, spec.spacing
    pts = spec.centers[f.support()]
    lo = pts.min(axis=0) - h0 / 2
    hi = pts.max(axis=0) + h0 / 2
    diam = float(np.linalg.norm(hi - lo))
    near = 32 * h0 if cfg.near_field is None else float(cfg.near_field)
    pad = cfg.region_factor * diam + near
    origin = spec.origin
    root = origin + np.floor((lo - pad - origin) / h0) * h0
    side = float(np.max(hi + pad - root))
    p = max(0, int(math.ceil(math.log2(side / h0) - 1e-12)))
    H = h0 * 2**p

    tree = cKDTree(pts)
    offsets = np.stack(
        np.meshgrid(*([np.arange(2)] * n), indexing="ij"), axis=-1
    ).reshape(-1, n)
    corners = root[None, :]
    h = H
    leaf_c, leaf_v = [], []
    while corners.size:
        mids = corners + h / 2
        d, _ = tree.query(mids)
        dist = np.maximum(0.0, d - h * math.sqrt(n) / 2)
        refine = (h > h0 * (1 + 1e-9)) & ((dist < near) | (h > dist / 4))
        leaf_c.append(mids[~refine])
        leaf_v.append(np.full(int((~refine).sum()), h**n))
        kids = corners[refine]
        h /= 2
        corners = (kids[:, None, :] + offsets[None, :, :] * h).reshape(-1, n)
    centers = np.concatenate(leaf_c)
    volumes = np.concatenate(leaf_v)
    order = np.lexsort(centers.T[::-1])
    centers, volumes = centers[order], volumes[order]

    if cfg.scales is None:
        reach = 4.0 * H * math.sqrt(n)
        K = max(cfg.min_scales - 1, int(math.ceil(math.log2(reach / h0) - 1e-12)))
        scales = h0 * 2.0 ** np.arange(K + 1)
    else:
        scales = np.asarray(cfg.scales)
        span = float(np.max(pts.max(axis=0) - pts.min(axis=0))) if len(pts) > 1 else 0.0
        if scales[-1] < span:
            raise PreconditionError(
                f"largest scale {scales[-1]:.6g} does not cover the support extent {span:.6g}"
            )
    return MaximalMesh(np.ascontiguousarray(centers), volumes, np.ascontiguousarray(scales))


def maximal_function(f: GridFn, points: np.ndarray, scales: np.ndarray, workers: int = 1) -> np.ndarray:
    """``max_k |phi_{t_k} * f|`` at arbitrary points, by direct summation."""
    spec = f.spec
    idx = f.support()
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    out = np.zeros(pts.shape[0])
    if idx.size == 0 or pts.shape[0] == 0:
        return out
    yp = np.ascontiguousarray(spec.centers[idx])
    yv = np.ascontiguousarray(f.flat[idx] * spec.cell_volume)
    scales = np.ascontiguousarray(scales, dtype=float)
    c = bump_norm(spec.n)

    def run(lo, hi):
        _tensor.maximal_values(pts[lo:hi], yp, yv, scales, c, spec.n, out[lo:hi])

    E = pts.shape[0]
    if workers <= 1 or E < 2 * workers:
        run(0, E)
    else:
        bounds = np.linspace(0, E, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    return out


def h1_norm_estimate(f: GridFn, cfg: MaximalConfig | None = None) -> float:
    """Integral of the smooth maximal function over a multiresolution mesh.

    An equivalent-norm estimate of ``|f|_H1``: only ratios between estimates
    are meaningful.  Warns with :class:`CancellationWarning` when ``f`` does
    not integrate to zero.
    """
    cfg = cfg or MaximalConfig()
    if f.support().size == 0:
        return 0.0
    l1 = lp_norm(f, 1)
    if abs(integrate(f)) > 1e-8 * l1:
        warnings.warn(
            f"h1 estimate of a function with integral {integrate(f):.3g}", CancellationWarning, stacklevel=2
        )
    mesh = maximal_mesh(f, cfg)
    vals = maximal_function(f, mesh.centers, mesh.scales, cfg.workers)
    return fsum(vals * mesh.volumes)


# ---------------------------------------------------------------- BMO


def bmo_norm(b: GridFn, max_chunk: int = 4_000_000) -> float:
    """Largest mean oscillation over grid-aligned cubes of side ``spacing * 2^j``."""
    vals = b.values
    n, N = b.spec.n, b.spec.N
    best = 0.0
    s = 1
    while s <= N:
        win = sliding_window_view(vals, (s,) * n)
        rows = win.shape[0]
        per_row = int(np.prod(win.shape[1:]))
        step = max(1, max_chunk // max(per_row, 1))
        axes = tuple(range(n, 2 * n))
        for lo in range(0, rows, step):
            w = win[lo : lo + step]
            mean = w.mean(axis=axes, keepdims=True)
            osc = np.abs(w - mean).mean(axis=axes)
            best = max(best, float(osc.max()))
        s *= 2
    return best


# ---------------------------------------------------------------- commutator probes


@dataclass(frozen=True, eq=False)
class CommutatorProbe:
    """Test tuple ``(g, h_1..h_m)`` with the exponents of its norms."""

    g: GridFn
    hs: tuple[GridFn, ...]
    p_prime: float
    ps: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "hs", tuple(self.hs))
        object.__setattr__(self, "ps", tuple(float(p) for p in self.ps))
        if len(self.ps) != len(self.hs):
            raise PreconditionError("one exponent per h is required")

    def norm_product(self) -> float:
        out = lp_norm(self.g, self.p_prime)
        for h, p in zip(self.hs, self.ps):
            out *= lp_norm(h, p)
        return out


def commutator_ratios(
    cfg: OperatorConfig,
    l: int,
    b: GridFn,
    family: Sequence[CommutatorProbe],
    stats: OperatorStats | None = None,
) -> list[float | None]:
    """Per-probe ``|<g, [b,T]_l(h)>| / (|g|_p' prod |h_j|_pj)``; ``None`` for skipped probes."""
    out: list[float | None] = []
    for probe in family:
        denom = probe.norm_product()
        if denom == 0:
            out.append(None)
            continue
        at = probe.g.support()
        c = commutator_apply(cfg, l, b, probe.hs, at=at, stats=stats)
        out.append(abs(inner(probe.g, c)) / denom)
    return out


def estimate_commutator_norm(
    cfg: OperatorConfig,
    l: int,
    b: GridFn,
    family: Sequence[CommutatorProbe],
    stats: OperatorStats | None = None,
) -> float:
    """Lower bound for the commutator norm: the best ratio over ``family``."""
    if not family:
        raise PreconditionError("commutator probe family is empty")
    ratios = [v for v in commutator_ratios(cfg, l, b, family, stats) if v is not None]
    return max(ratios) if ratios else 0.0


def separated_family(
    spec: GridSpec,
    M: float,
    r: float,
    m: int,
    l: int,
    base_points: Sequence,
    p_prime: float,
    ps: Sequence[float],
) -> list[CommutatorProbe]:
    """Probes shaped like the factorization tuples at separation ``M r``.

    For each base point ``x0``: ``h_l`` is the indicator of ``B(x0, r)``,
    ``g`` sits on the ball of slot ``l`` and the other ``h_j`` on the
    remaining ray balls.
    """
    family = []
    for x0 in base_points:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        centers = ray_centers(x0, M * r, m, l)
        balls = [Ball(c, r) for c in centers]
        for b in [Ball(x0, r)] + balls:
            spec.require_ball(b, 0.0, "probe ball")
            if 2 * r / spec.spacing < MIN_CELLS_ACROSS:
                raise ResolutionError("probe balls are not resolved")
        hs = [ball_indicator(bb, spec) for bb in balls]
        g = hs[l - 1]
        hs[l - 1] = ball_indicator(Ball(x0, r), spec)
        family.append(CommutatorProbe(g, tuple(hs), p_prime, tuple(ps)))
    return family
