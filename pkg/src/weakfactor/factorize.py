"""Per-atom approximate factorization and the geometric iteration built on it.

An atom ``a`` on ``B(x0, r)`` is approximated by ``Pi_l(g, h)`` where ``g``
and ``h_j`` (``j != l``) are ball indicators placed at distance ``~M r`` and
``h_l = a / T_l*(h_1, .., g, .., h_m)(x0)``.  The error ``a - Pi_l(g, h)`` is
a two-bump function of size ``O(M^-eps)``; decomposing it into atoms and
repeating gives an l1-summable series of ``Pi_l`` terms.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .errors import DegenerateGeometryError, NonContractionError, PreconditionError
from .grid import Ball, GridFn, GridSpec, ball_indicator, ball_mask, grid_covering, lp_norm
from .hardy import (
    AtomicDecomposition,
    HAtom,
    MaximalConfig,
    TwoBump,
    chain_plan,
    h1_norm_estimate,
    two_bump_decompose,
)
from .kernels import HomogeneityGeometry, check_resolved, ray_centers
from .operators import OperatorConfig, OperatorStats, evaluate_points, pi_apply

DEN_FLOOR = 1e-3
EXP_TOL = 1e-12


@dataclass(frozen=True)
class FactorExponents:
    """Exponents with ``1/p = sum 1/p_j``; ``p_prime`` is conjugate to ``p``."""

    p: float
    ps: tuple[float, ...]

    def __post_init__(self):
        ps = tuple(float(v) for v in np.atleast_1d(self.ps))
        object.__setattr__(self, "ps", ps)
        object.__setattr__(self, "p", float(self.p))
        if not (1 <= self.p < math.inf):
            raise PreconditionError(f"p must lie in [1, inf), got {self.p}")
        if not ps or any(not (1 < q < math.inf) for q in ps):
            raise PreconditionError(f"each p_j must lie in (1, inf), got {ps}")
        if abs(1 / self.p - math.fsum(1 / q for q in ps)) > EXP_TOL:
            raise PreconditionError(f"1/p = {1 / self.p} differs from sum 1/p_j = {sum(1 / q for q in ps)}")

    @property
    def m(self) -> int:
        return len(self.ps)

    @property
    def p_prime(self) -> float:
        return math.inf if self.p == 1 else self.p / (self.p - 1)

    @classmethod
    def default(cls, m: int) -> "FactorExponents":
        """``p = 1, p_j = m`` for ``m >= 2``; ``p = p_1 = 2`` when ``m = 1``."""
        if m == 1:
            return cls(2.0, (2.0,))
        return cls(1.0, (float(m),) * m)

    def to_dict(self) -> dict:
        pp = self.p_prime
        return {"p": self.p, "ps": list(self.ps), "p_prime": "inf" if math.isinf(pp) else pp}


@dataclass(frozen=True, eq=False)
class FactorTerm:
    """``lam * Pi_l(g, h_1, .., h_m)`` with cached factor norms."""

    lam: float
    l: int
    g: GridFn
    hs: tuple[GridFn, ...]
    exps: FactorExponents
    g_norm: float = field(init=False)
    h_norms: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "hs", tuple(self.hs))
        if len(self.hs) != self.exps.m:
            raise PreconditionError("number of h factors differs from the exponent count")
        object.__setattr__(self, "g_norm", lp_norm(self.g, self.exps.p_prime))
        object.__setattr__(self, "h_norms", tuple(lp_norm(h, p) for h, p in zip(self.hs, self.exps.ps)))

    @property
    def norm_product(self) -> float:
        return self.g_norm * math.prod(self.h_norms)


@dataclass(frozen=True, eq=False)
class AtomFactorization:
    atom: HAtom
    l: int
    M: float
    g: GridFn
    hs: tuple[GridFn, ...]
    denominator: float
    pi: GridFn
    error_fn: GridFn
    c_den: float
    c_pt: float
    support_ok: bool
    norm_product: float
    norm_constant: float
    h1_error: float | None

    def error_two_bump(self) -> TwoBump:
        r = self.atom.radius
        y = ray_centers(self.atom.ball.center, self.M * r, len(self.hs), self.l)[self.l - 1]
        amp = lp_norm(self.error_fn, math.inf)
        return TwoBump(self.error_fn, self.atom.ball.center, y, r, amp)

    def diagnostics(self) -> dict:
        return {
            "M": self.M,
            "l": self.l,
            "denominator": self.denominator,
            "c_den": self.c_den,
            "c_pt": self.c_pt,
            "support_ok": self.support_ok,
            "norm_product": self.norm_product,
            "norm_constant": self.norm_constant,
            "h1_error": self.h1_error,
        }


def approx_factor_atom(
    cfg: OperatorConfig,
    l: int,
    a: HAtom,
    M: float,
    exps: FactorExponents | None = None,
    maximal: MaximalConfig | None = None,
    with_h1: bool = True,
    stats: OperatorStats | None = None,
) -> AtomFactorization:
    """Factor one atom approximately; see the module docstring.

    Raises :class:`DegenerateGeometryError` when the denominator falls below
    ``1e-3 * M^-(mn)`` and :class:`PaddingError` when the construction balls
    do not fit the master grid with padding ``2r``.
    """
    k = cfg.kernel
    m, n = k.m, k.n
    exps = exps or FactorExponents.default(m)
    if exps.m != m:
        raise PreconditionError("exponent count differs from the kernel's m")
    spec = cfg.eval_mesh
    if a.spec != spec:
        raise PreconditionError("atom lives on a different grid")
    r = a.radius
    geom = HomogeneityGeometry(r, M, a.ball.center, m, l)
    for b in [a.ball] + geom.balls:
        check_resolved(b, spec, "factorization ball")
        spec.require_ball(b, 2 * r, "factorization ball")
    balls = geom.balls
    hs = [ball_indicator(b, spec) for b in balls]
    g = hs[l - 1]
    den = float(evaluate_points(cfg, hs, np.asarray(a.ball.center), swap=l, stats=stats)[0])
    floor = DEN_FLOOR * M ** -(m * n)
    if not abs(den) >= floor:
        raise DegenerateGeometryError(
            f"denominator {den:.3g} below {floor:.3g}: the kernel is not homogeneous on this geometry"
        )
    hs[l - 1] = a.fn / den
    pi = pi_apply(cfg, l, g, hs, stats=stats)
    err = a.fn - pi

    env = ball_mask(a.ball, spec).astype(float) + ball_mask(balls[l - 1], spec)
    absval = np.abs(err.flat)
    support_ok = not np.any((env == 0) & (absval > 0))
    inside = env > 0
    c_pt = float(np.max(absval[inside] / env[inside])) * M**k.eps * r**n if inside.any() else 0.0

    norm_product = float(lp_norm(g, exps.p_prime) * math.prod(lp_norm(h, p) for h, p in zip(hs, exps.ps)))
    h1 = h1_norm_estimate(err, maximal) if with_h1 else None
    return AtomFactorization(
        atom=a,
        l=l,
        M=float(M),
        g=g,
        hs=tuple(hs),
        denominator=den,
        pi=pi,
        error_fn=err,
        c_den=abs(den) * M ** (m * n),
        c_pt=c_pt,
        support_ok=bool(support_ok),
        norm_product=norm_product,
        norm_constant=norm_product / M ** (m * n),
        h1_error=h1,
    )


@dataclass(frozen=True)
class IterationRecord:
    k: int
    sum_abs_lambda: float
    residual_h1: float
    term_count: int
    rho: float | None = None  # sum |lambda^{k+1}| / sum |lambda^k|, once known

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "sum_abs_lambda": self.sum_abs_lambda,
            "residual_h1": self.residual_h1,
            "term_count": self.term_count,
            "rho": self.rho,
        }


@dataclass
class FactorizationReport:
    """Per-iteration records plus the H1 estimate of the input."""

    records: list[IterationRecord] = field(default_factory=list)
    initial_h1: float = 0.0
    converged: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def rho_max(self) -> float | None:
        rhos = [r.rho for r in self.records if r.rho is not None]
        return max(rhos) if rhos else None

    @property
    def total_abs_lambda(self) -> float:
        return math.fsum(r.sum_abs_lambda for r in self.records)

    def to_dict(self) -> dict:
        return {
            "initial_h1": self.initial_h1,
            "converged": self.converged,
            "iterations": [r.to_dict() for r in self.records],
        }


def weak_factorize(
    cfg: OperatorConfig,
    l: int,
    f: AtomicDecomposition,
    M: float,
    exps: FactorExponents | None = None,
    max_iters: int = 12,
    tol: float = 1e-2,
    maximal: MaximalConfig | None = None,
    stats: OperatorStats | None = None,
) -> tuple[list[FactorTerm], FactorizationReport]:
    """Iterate :func:`approx_factor_atom` on the atoms of successive errors.

    Iteration ``k`` factors every atom of the current decomposition, records
    the H1 estimate of the summed error ``E_k`` and stops once it is at most
    ``tol`` times the estimate of the input.  Otherwise each error function is
    decomposed on its own and the resulting atoms feed iteration ``k + 1``.
    A contraction ratio ``rho >= 1`` raises :class:`NonContractionError`.
    """
    exps = exps or FactorExponents.default(cfg.m)
    atoms = [(lam, a) for lam, a in f.terms if lam != 0]
    report = FactorizationReport()
    terms: list[FactorTerm] = []
    if not atoms:
        return terms, report
    spec = cfg.eval_mesh
    report.initial_h1 = h1_norm_estimate(f.total(spec), maximal)
    for k in range(1, max_iters + 1):
        fac = [approx_factor_atom(cfg, l, a, M, exps, with_h1=False, stats=stats) for _, a in atoms]
        E = np.zeros(spec.size)
        for (lam, _), af in zip(atoms, fac):
            terms.append(FactorTerm(lam, l, af.g, af.hs, exps))
            E += lam * af.error_fn.flat
        residual = h1_norm_estimate(GridFn(spec, E), maximal)
        level = math.fsum(abs(lam) for lam, _ in atoms)
        record = IterationRecord(k, level, residual, len(atoms))
        if residual <= tol * report.initial_h1:
            report.records.append(record)
            report.converged = True
            break
        if k == max_iters:
            report.records.append(record)
            break
        nxt = []
        for (lam, _), af in zip(atoms, fac):
            for mu, b in two_bump_decompose(af.error_two_bump()).terms:
                if mu != 0:
                    nxt.append((lam * mu, b))
        rho = math.fsum(abs(lam) for lam, _ in nxt) / level
        report.records.append(IterationRecord(k, level, residual, len(atoms), rho))
        if rho >= 1:
            raise NonContractionError(
                f"iteration {k} has contraction ratio {rho:.3g} >= 1; increase M (now {M})"
            )
        atoms = nxt
    return terms, report


def reconstruct(cfg: OperatorConfig, terms: Sequence[FactorTerm], stats: OperatorStats | None = None) -> GridFn:
    """``sum lam * Pi_l(g, h)`` over the terms, evaluated one by one."""
    spec = cfg.eval_mesh
    acc = np.zeros(spec.size)
    for t in terms:
        acc += t.lam * pi_apply(cfg, t.l, t.g, t.hs, stats=stats).flat
    return GridFn(spec, acc)


# ---------------------------------------------------------------- grid planning


def plan_balls(
    ball: Ball, M: float, m: int, l: int, iterations: int, decompose_last: bool = False
) -> list[tuple[Ball, float]]:
    """Every ball the iteration can touch in ``iterations`` rounds, with its padding.

    Dry-runs the geometry only: construction balls of each atom (padding
    ``2 rho``), and for all rounds but the last the chain balls of the error
    decomposition and the atoms they produce.  ``decompose_last`` adds the
    chain balls of the last round as well.
    """
    out: list[tuple[Ball, float]] = []
    level = [ball]
    for k in range(1, iterations + 1):
        nxt: dict[tuple, Ball] = {}
        for b in level:
            rho = b.radius
            centers = ray_centers(b.center, M * rho, m, l)
            out.append((b, 2 * rho))
            out.extend((Ball(c, rho), 2 * rho) for c in centers)
            if k == iterations and not decompose_last:
                continue
            plan = chain_plan(b.center, centers[l - 1], rho)
            out.extend((bb, 0.0) for bb in plan.x_balls + plan.y_balls)
            if k == iterations:
                continue
            for bb in plan.atom_balls():
                key = tuple(np.round(np.append(bb.center, bb.radius), 9))
                nxt.setdefault(key, bb)
        level = list(nxt.values())
    return out


def plan_grid(
    ball: Ball,
    M: float,
    m: int,
    l: int = 1,
    iterations: int = 1,
    cells_per_diameter: int = 16,
    padding_factor: float = 1.0,
    decompose_last: bool = False,
) -> GridSpec:
    """Master grid for factorizing atoms on ``ball`` for ``iterations`` rounds.

    The box covers every planned ball plus its own padding, then a further
    ``padding_factor * max(4 r, 8 spacing)``; cell boundaries pass through the
    atom centre.
    """
    spacing = 2 * ball.radius / cells_per_diameter
    planned = plan_balls(ball, M, m, l, iterations, decompose_last)
    grown = [Ball(b.center, b.radius + pad) for b, pad in planned]
    pad = padding_factor * max(4 * ball.radius, 8 * spacing)
    return grid_covering(grown, spacing, pad, anchor=ball.center)


# ---------------------------------------------------------------- artifacts


def convergence_csv(report: FactorizationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["k", "sum_abs_lambda", "residual_h1"])
    for r in report:
        w.writerow([r.k, repr(r.sum_abs_lambda), repr(r.residual_h1)])
    return buf.getvalue()


def write_factorization(
    directory: str,
    cfg: OperatorConfig,
    l: int,
    M: float,
    exps: FactorExponents,
    terms: Sequence[FactorTerm],
    report: FactorizationReport,
    extra: dict | None = None,
) -> str:
    """Write the JSON manifest, the GridFn files it references and the CSV table."""
    fdir = os.path.join(directory, "terms")
    os.makedirs(fdir, exist_ok=True)
    items = []
    for s, t in enumerate(terms):
        refs = {}
        for name, fn in [("g", t.g)] + [(f"h{j + 1}", h) for j, h in enumerate(t.hs)]:
            ref = f"terms/t{s:05d}_{name}.txt"
            with open(os.path.join(directory, ref), "w", newline="\n") as fh:
                fh.write(fn.to_text())
            refs[name] = ref
        items.append({"lambda": t.lam, "l": t.l, "refs": refs, "g_norm": t.g_norm, "h_norms": list(t.h_norms)})
    manifest = {
        "version": __version__,
        "kernel": cfg.kernel.to_dict(),
        "grid": cfg.eval_mesh.to_dict(),
        "l": l,
        "M": M,
        "exponents": exps.to_dict(),
        "report": report.to_dict(),
        "terms": items,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, "factorization.json")
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, "convergence.csv"), "w", newline="") as fh:
        fh.write(convergence_csv(report))
    return path
