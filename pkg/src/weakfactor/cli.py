"""Command line driver for the verification campaigns.

Every command reads a JSON config (``--config``), applies flag overrides and
writes JSON manifests and RFC-4180 CSV tables into the output directory.
Artifacts carry no timestamps and no worker count, so reruns with the same
config and seed are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    NonContractionError,
    PreconditionError,
    WeakFactorError,
)
from .factorize import (
    FactorExponents,
    approx_factor_atom,
    plan_grid,
    reconstruct,
    weak_factorize,
    write_factorization,
)
from .grid import Ball, Box, GridFn, GridSpec, ball_mask, grid_covering, lp_norm, make_grid_fn
from .hardy import (
    AtomicDecomposition,
    bmo_norm,
    commutator_ratios,
    make_atom,
    separated_family,
    two_bump_decompose,
)
from .kernels import (
    HomogeneityGeometry,
    homogeneity_measure,
    identity_defects,
    ray_centers,
    riesz,
    verifier_report,
)
from .operators import OperatorConfig, duality_defect

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_NONCONTRACTION = 4
EXIT_DEGENERATE = 5
EXIT_IO = 6

B_KINDS = ("sign", "log", "constant")
PROFILES = ("dipole", "haar_like")


@dataclass
class GridOptions:
    points_per_axis: int | None = None
    padding_factor: float = 1.0
    cells_per_diameter: int = 16


@dataclass
class RunConfig:
    """Resolved experiment settings; unknown keys are rejected."""

    m: int = 1
    n: int = 1
    l: int = 1
    j: int = 1
    i: int = 1
    M: list[float] = field(default_factory=lambda: [32.0])
    r: float = 1.0
    grid: GridOptions = field(default_factory=GridOptions)
    exponents: dict | None = None
    max_iters: int = 12
    tol: float = 1e-2
    seed: int = 0
    output_dir: str = "."
    profile: str = "dipole"
    plan_iterations: int = 2
    samples: int = 10_000
    identity_samples: int = 1_000
    family_size: int = 50
    b: str = "sign"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        grid = data.pop("grid", None) or {}
        if not isinstance(grid, dict):
            raise ConfigError("'grid' must be an object")
        gnames = {f.name for f in dataclasses.fields(GridOptions)}
        bad = sorted(set(grid) - gnames)
        if bad:
            raise ConfigError(f"unknown grid key(s): {', '.join(bad)}")
        if "M" in data:
            data["M"] = _m_list(data["M"])
        cfg = cls(grid=GridOptions(**grid), **data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("m", "n", "l", "j", "i", "max_iters", "seed", "plan_iterations", "samples",
                     "identity_samples", "family_size"):
            need(isinstance(getattr(self, name), int) and not isinstance(getattr(self, name), bool),
                 f"{name} must be an integer")
        need(self.m >= 1 and self.n >= 1, "m and n must be >= 1")
        need(1 <= self.l <= self.m, f"slot l={self.l} must lie in [1, m={self.m}]")
        need(1 <= self.j <= self.m, f"kernel slot j={self.j} must lie in [1, m={self.m}]")
        need(1 <= self.i <= self.n, f"component i={self.i} must lie in [1, n={self.n}]")
        need(self.r > 0, "r must be positive")
        need(0 < self.tol < 1, "tol must lie in (0, 1)")
        need(self.max_iters >= 1, "max_iters must be >= 1")
        need(self.plan_iterations >= 1, "plan_iterations must be >= 1")
        need(self.samples >= 1 and self.identity_samples >= 1, "sample counts must be >= 1")
        need(self.family_size >= 1, "family_size must be >= 1")
        need(self.seed >= 0, "seed must be >= 0")
        need(self.profile in PROFILES, f"profile must be one of {PROFILES}")
        need(self.b in B_KINDS, f"b must be one of {B_KINDS}")
        need(len(self.M) >= 1 and all(v > 0 for v in self.M), "M must be a nonempty list of positive numbers")
        g = self.grid
        need(g.points_per_axis is None or (isinstance(g.points_per_axis, int) and g.points_per_axis >= 4),
             "grid.points_per_axis must be null or an integer >= 4")
        need(g.padding_factor >= 0, "grid.padding_factor must be >= 0")
        need(isinstance(g.cells_per_diameter, int) and g.cells_per_diameter >= 8,
             "grid.cells_per_diameter must be an integer >= 8 (balls need 8 cells across)")
        self.exps()

    def exps(self) -> FactorExponents:
        if self.exponents is None:
            return FactorExponents.default(self.m)
        e = self.exponents
        if not isinstance(e, dict) or set(e) - {"p", "ps"} or "p" not in e or "ps" not in e:
            raise ConfigError("exponents must be an object with keys 'p' and 'ps'")
        try:
            exps = FactorExponents(e["p"], tuple(e["ps"]))
        except PreconditionError as exc:
            raise ConfigError(f"exponents: {exc}") from None
        if exps.m != self.m:
            raise ConfigError(f"exponents list has {exps.m} entries, m is {self.m}")
        return exps

    def kernel(self):
        return riesz(self.m, self.n, self.j, self.i)

    def to_dict(self) -> dict:
        """Resolved settings; the output location is left out so artifacts do not depend on it."""
        out = dataclasses.asdict(self)
        del out["output_dir"]
        out["exponents"] = self.exps().to_dict()
        return out


def _m_list(value) -> list[float]:
    if isinstance(value, str):
        try:
            return [float(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse M list {value!r}") from None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        return [float(v) for v in value]
    raise ConfigError("M must be a number, a list of numbers or a comma separated string")


# ---------------------------------------------------------------- artifacts


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


class Writer:
    """Writes artifacts into one directory and keeps the list of files written."""

    def __init__(self, directory: str, rc: RunConfig, command: str):
        self.directory = directory
        self.rc = rc
        self.command = command
        self.files: list[str] = []

    def header(self) -> dict:
        return {"version": __version__, "command": self.command, "config": self.rc.to_dict()}

    def json(self, name: str, payload: dict) -> str:
        doc = self.header()
        doc.update(payload)
        path = os.path.join(self.directory, name)
        with open(path, "w", newline="\n") as fh:
            json.dump(_jsonable(doc), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        self.files.append(name)
        return path

    def csv(self, name: str, header: list[str], rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)  # CRLF line ends per RFC 4180
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        path = os.path.join(self.directory, name)
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
        self.files.append(name)
        return path

    def gridfn(self, name: str, fn: GridFn) -> str:
        with open(os.path.join(self.directory, name), "w", newline="\n") as fh:
            fh.write(fn.to_text())
        self.files.append(name)
        return name


# ---------------------------------------------------------------- helpers


def _single_M(rc: RunConfig) -> float:
    if len(rc.M) != 1:
        raise ConfigError(f"this command takes a single M, got {rc.M}")
    M = rc.M[0]
    if not M > 10:
        raise ConfigError(f"M must exceed 10 for factorization, got {M}")
    return M


def _factor_grid(rc: RunConfig, M: float, iterations: int, decompose_last: bool = False) -> GridSpec:
    ball = Ball(np.zeros(rc.n), rc.r)
    g = rc.grid
    spec = plan_grid(ball, M, rc.m, rc.l, iterations, g.cells_per_diameter, g.padding_factor, decompose_last)
    if rc.grid.points_per_axis is not None:
        spec = GridSpec(spec.box, rc.grid.points_per_axis)
    return spec


def _operator(rc: RunConfig, spec: GridSpec, workers: int) -> OperatorConfig:
    return OperatorConfig(rc.kernel(), spec, workers=workers)


def _atom(rc: RunConfig, spec: GridSpec):
    return make_atom(Ball(np.zeros(rc.n), rc.r), spec, rc.profile)


def _b_function(kind: str, spec: GridSpec) -> GridFn:
    if kind == "sign":
        return make_grid_fn(spec, lambda x: np.sign(x[:, 0]))
    if kind == "log":
        floor = spec.spacing
        return make_grid_fn(spec, lambda x: np.log(np.maximum(np.linalg.norm(x, axis=1), floor)))
    return make_grid_fn(spec, lambda x: np.ones(len(x)))


# ---------------------------------------------------------------- commands


def cmd_atom_factor(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    M = _single_M(rc)
    spec = _factor_grid(rc, M, 1)
    cfg = _operator(rc, spec, workers)
    atom = _atom(rc, spec)
    af = approx_factor_atom(cfg, rc.l, atom, M, rc.exps())
    refs = {"atom": out.gridfn("atom.txt", atom.fn), "g": out.gridfn("g.txt", af.g)}
    for s, h in enumerate(af.hs, start=1):
        refs[f"h{s}"] = out.gridfn(f"h{s}.txt", h)
    refs["error"] = out.gridfn("error.txt", af.error_fn)

    geom = HomogeneityGeometry(rc.r, M, tuple(np.zeros(rc.n)), rc.m, rc.l)
    env = ball_mask(atom.ball, spec).astype(float) + ball_mask(geom.balls[rc.l - 1], spec)
    idx = np.flatnonzero((env > 0) | (af.error_fn.flat != 0))
    pts = spec.centers[idx]
    err = af.error_fn.flat[idx]
    rows = []
    for p, e, v in zip(pts, err, env[idx]):
        rows.append([*(float(c) for c in p), float(v), float(e), abs(float(e)) / v if v > 0 else None])
    coords = [f"x{d + 1}" for d in range(rc.n)]
    out.csv("error_profile.csv", coords + ["envelope", "error", "ratio"], rows)

    diag = af.diagnostics()
    diag["integral_error"] = float(abs(np.sum(af.error_fn.flat)) * spec.cell_volume)
    diag["c_low"] = homogeneity_measure(cfg.kernel, geom, spec, workers=workers)
    out.json("diagnostics.json", {"diagnostics": diag})
    out.json(
        "atom_factor.json",
        {
            "kernel": cfg.kernel.to_dict(),
            "grid": spec.to_dict(),
            "atom": {"ball": atom.ball.to_dict(), "profile": rc.profile},
            "exponents": rc.exps().to_dict(),
            "M": M,
            "l": rc.l,
            "refs": refs,
            "diagnostics": "diagnostics.json",
            "error_profile": "error_profile.csv",
        },
    )
    return EXIT_OK


def cmd_sweep_m(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    Ms = rc.M
    if len(Ms) < 3:
        raise ConfigError(f"sweep-m needs at least 3 values of M, got {Ms}")
    if any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise ConfigError(f"M values must be strictly increasing, got {Ms}")
    if not Ms[0] > 10:
        raise ConfigError(f"M must exceed 10 for factorization, got {Ms[0]}")
    rows = []
    for M in Ms:
        spec = _factor_grid(rc, M, 1, decompose_last=True)
        cfg = _operator(rc, spec, workers)
        af = approx_factor_atom(cfg, rc.l, _atom(rc, spec), M, rc.exps())
        geom = HomogeneityGeometry(rc.r, M, tuple(np.zeros(rc.n)), rc.m, rc.l)
        c_low = homogeneity_measure(cfg.kernel, geom, spec, workers=workers)
        lam = two_bump_decompose(af.error_two_bump()).sum_abs_lambda
        rows.append(
            {
                "M": M,
                "h1_error": af.h1_error,
                "norm_product": af.norm_product,
                "C_pt": af.c_pt,
                "c_low": c_low,
                "sum_abs_lambda": lam,
                "c_den": af.c_den,
                "norm_constant": af.norm_constant,
                "points_per_axis": spec.N,
            }
        )
    cols = ["M", "h1_error", "norm_product", "C_pt", "c_low", "sum_abs_lambda"]
    out.csv("sweep_m.csv", cols, ([row[c] for c in cols] for row in rows))
    out.json("sweep_m.json", {"rows": rows, "table": "sweep_m.csv"})
    return EXIT_OK


def cmd_factorize(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    M = _single_M(rc)
    spec = _factor_grid(rc, M, rc.plan_iterations)
    cfg = _operator(rc, spec, workers)
    atom = _atom(rc, spec)
    exps = rc.exps()
    terms, report = weak_factorize(cfg, rc.l, AtomicDecomposition([(1.0, atom)]), M, exps, rc.max_iters, rc.tol)
    rec = reconstruct(cfg, terms)
    l1_input = lp_norm(atom.fn, 1)
    l1_residual = lp_norm(atom.fn - rec, 1)
    final = report[-1].residual_h1 if len(report) else 0.0
    extra = {
        "version": __version__,
        "command": out.command,
        "config": _jsonable(rc.to_dict()),
        "reconstruction": {"l1_input": l1_input, "l1_residual": l1_residual},
        "rho_max": report.rho_max,
        "final_residual_h1": final,
        "total_abs_lambda": report.total_abs_lambda,
    }
    write_factorization(out.directory, cfg, rc.l, M, exps, terms, report, extra=_jsonable(extra))
    out.files += ["factorization.json", "convergence.csv"]
    return EXIT_OK


def cmd_check_kernels(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    k = rc.kernel()
    small = verifier_report(k, rc.samples, rc.seed)
    large = verifier_report(k, 10 * rc.samples, rc.seed)

    def growth(key):
        a, b = small[key], large[key]
        return (b - a) / a if a > 0 else None

    out.json(
        "check_kernels.json",
        {
            "kernel": k.to_dict(),
            "verifier": small,
            "verifier_10x": large,
            "growth": {"measured_A": growth("measured_A"), "measured_ratio": growth("measured_ratio")},
            "identities": identity_defects(k, rc.identity_samples, rc.seed),
            "identity_samples": rc.identity_samples,
        },
    )
    return EXIT_OK


def random_operands(spec: GridSpec, count: int, rng: np.random.Generator) -> list[GridFn]:
    """Gaussian grid functions, each zeroed on a random half of the cells."""
    out = []
    for _ in range(count):
        v = rng.standard_normal(spec.size) * (rng.random(spec.size) < 0.5)
        out.append(GridFn(spec, v))
    return out


def duality_grid(rc: RunConfig) -> GridSpec:
    N = rc.grid.points_per_axis or (64 if rc.m == 1 else 32)
    return GridSpec(Box(np.zeros(rc.n), [2.0] * rc.n), N)


def cmd_duality(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    spec = duality_grid(rc)
    if spec.size > 100_000 or spec.size ** (rc.m + 1) > 1e10:
        raise ConfigError(f"duality grid with {spec.size} cells is too large for the full tensor sums")
    cfg = _operator(rc, spec, workers)
    rng = np.random.default_rng(rc.seed)
    rows = []
    for s in range(rc.family_size):
        b, g, *hs = random_operands(spec, rc.m + 2, rng)
        d = duality_defect(cfg, rc.l, b, g, hs)
        rows.append([s, d["pairing"], d["cancellation"], d["scale"], d["pairing"] / d["scale"]])
    out.csv("duality.csv", ["index", "pairing_defect", "cancellation_defect", "scale", "relative_defect"], rows)
    out.json(
        "duality.json",
        {
            "grid": spec.to_dict(),
            "family_size": rc.family_size,
            "max_pairing_defect": max(r[1] for r in rows),
            "max_cancellation_defect": max(r[2] for r in rows),
            "max_relative_defect": max(r[4] for r in rows),
            "table": "duality.csv",
        },
    )
    return EXIT_OK


def bmo_base_points(rc: RunConfig, M: float) -> list[np.ndarray]:
    """Base points ``-s M r u`` for ``s`` in ``(0, 1]``, so probe pairs straddle the origin."""
    u = np.ones(rc.n) / math.sqrt(rc.n)
    fracs = [0.125, 0.25, 0.5, 0.75, 1.0]
    return [-s * M * rc.r * u for s in fracs]


def bmo_grid(rc: RunConfig, M: float) -> GridSpec:
    spacing = 2 * rc.r / rc.grid.cells_per_diameter
    balls = []
    for x0 in bmo_base_points(rc, M):
        balls.append(Ball(x0, rc.r))
        balls += [Ball(c, rc.r) for c in ray_centers(x0, M * rc.r, rc.m, rc.l)]
    pad = rc.grid.padding_factor * max(4 * rc.r, 8 * spacing)
    return grid_covering(balls, spacing, pad, anchor=np.zeros(rc.n))


def cmd_bmo(rc: RunConfig, out: Writer, workers: int = 1) -> int:
    exps = rc.exps()
    rows = []
    for M in rc.M:
        spec = bmo_grid(rc, M)
        cfg = _operator(rc, spec, workers)
        b = _b_function(rc.b, spec)
        family = separated_family(spec, M, rc.r, rc.m, rc.l, bmo_base_points(rc, M), exps.p_prime, exps.ps)
        ratios = [v for v in commutator_ratios(cfg, rc.l, b, family) if v is not None]
        est = max(ratios) if ratios else 0.0
        norm = bmo_norm(b)
        rows.append({"M": M, "bmo_norm": norm, "commutator_estimate": est,
                     "ratio": est / norm if norm > 1e-12 else None, "probe_ratios": ratios})
    cols = ["M", "bmo_norm", "commutator_estimate", "ratio"]
    out.csv("bmo.csv", cols, ([row[c] for c in cols] for row in rows))
    out.json("bmo.json", {"b": rc.b, "rows": rows, "table": "bmo.csv"})
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig, Writer, int], int]] = {
    "atom-factor": cmd_atom_factor,
    "factorize": cmd_factorize,
    "sweep-m": cmd_sweep_m,
    "check-kernels": cmd_check_kernels,
    "duality": cmd_duality,
    "bmo": cmd_bmo,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakfactor", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"weakfactor {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--out", help="output directory (must exist)")
        s.add_argument("--workers", type=int, default=1, help="worker threads (artifacts do not depend on it)")
        s.add_argument("--seed", type=int)
        s.add_argument("--m", type=int)
        s.add_argument("--n", type=int)
        s.add_argument("--l", type=int)
        s.add_argument("--M", help="separation multiplier, or a comma separated list")
        s.add_argument("--r", type=float)
        s.add_argument("--tol", type=float)
        s.add_argument("--max-iters", type=int, dest="max_iters")
        s.add_argument("--b", choices=B_KINDS)
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for key in ("seed", "m", "n", "l", "M", "r", "tol", "max_iters", "b"):
        v = getattr(args, key)
        if v is not None:
            data[key] = v
    if args.out is not None:
        data["output_dir"] = args.out
    return RunConfig.from_dict(data)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        rc = load_config(args)
        if not os.path.isdir(rc.output_dir):
            raise FileNotFoundError(f"output directory {rc.output_dir!r} does not exist")
        out = Writer(rc.output_dir, rc, args.command)
        return COMMANDS[args.command](rc, out, args.workers)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except NonContractionError as exc:
        code, msg = EXIT_NONCONTRACTION, f"no contraction: {exc}"
    except DegenerateGeometryError as exc:
        code, msg = EXIT_DEGENERATE, f"degenerate geometry: {exc}"
    except PreconditionError as exc:
        code, msg = EXIT_PRECONDITION, f"precondition failed: {exc}"
    except WeakFactorError as exc:
        code, msg = EXIT_ERROR, f"error: {exc}"
    except OSError as exc:
        code, msg = EXIT_IO, f"i/o error: {exc}"
    print(f"weakfactor {args.command}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
