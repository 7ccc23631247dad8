"""Compiled tensor-product quadrature for multilinear kernels.

For every evaluation point ``x`` the routines sum ``K(args) * prod w_s(y_s)``
over all tuples ``(y_1, ..., y_m)`` drawn from the operand supports.  ``swap``
selects which kernel argument receives ``x``: 0 for T itself, ``l`` for the
l-th partial adjoint (then ``y_l`` moves into argument 0).

Tuples whose minimum pairwise distance, measured in index units, is below
``sqrt(thr2)`` are skipped.  The exclusion only looks at the set of m+1 points,
so it is the same for every choice of ``swap``.

Per-point sums use Neumaier compensation in a fixed loop order, so results do
not depend on how evaluation points are split across threads.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _load(a, q, arg, yp, yq, k, n):
    for c in range(n):
        a[arg, c] = yp[k, c]
        q[arg, c] = yq[k, c]


@njit(cache=True, nogil=True)
def riesz_tensor_sum(xp, xq, yp, yq, yw, offsets, m, n, j, i, swap, thr2, check, out, covered, excluded):
    E = xp.shape[0]
    power = (m * n + 1) / 2.0
    a = np.empty((m + 1, n))
    q = np.empty((m + 1, n))
    idx = np.zeros(m, np.int64)
    wpart = np.ones(m + 1)
    for s in range(m):
        if offsets[s + 1] == offsets[s]:
            for e in range(E):
                out[e] = 0.0
                covered[e] = True
                excluded[e] = 0
            return
    for e in range(E):
        for c in range(n):
            a[swap, c] = xp[e, c]
            q[swap, c] = xq[e, c]
        for s in range(m):
            idx[s] = 0
        total = 0.0
        comp = 0.0
        nin = 0
        nex = 0
        first = 0  # lowest slot whose point changed since the last tuple
        while True:
            for s in range(first, m):
                k = offsets[s] + idx[s]
                arg = s + 1
                if arg == swap:
                    arg = 0
                _load(a, q, arg, yp, yq, k, n)
                wpart[s + 1] = wpart[s] * yw[k]
            skip = False
            if check:
                for p in range(m + 1):
                    for p2 in range(p + 1, m + 1):
                        d2 = 0.0
                        for c in range(n):
                            d = q[p, c] - q[p2, c]
                            d2 += d * d
                        if d2 < thr2:
                            skip = True
                            break
                    if skip:
                        break
            if skip:
                nex += 1
            else:
                nin += 1
                sq = 0.0
                for s in range(1, m + 1):
                    for c in range(n):
                        d = a[0, c] - a[s, c]
                        sq += d * d
                v = wpart[m] * (a[0, i] - a[j, i]) / sq**power
                t = total + v
                if abs(total) >= abs(v):
                    comp += (total - t) + v
                else:
                    comp += (v - t) + total
                total = t
            s = m - 1
            while s >= 0:
                idx[s] += 1
                if idx[s] < offsets[s + 1] - offsets[s]:
                    break
                idx[s] = 0
                s -= 1
            if s < 0:
                break
            first = s
        out[e] = total + comp
        covered[e] = nin > 0
        excluded[e] = nex


def numpy_tensor_sum(kernel_fn, xp, xq, ys_p, ys_q, ys_w, swap, thr2, check, chunk_elems=2_000_000):
    """Pure-numpy counterpart of :func:`riesz_tensor_sum` for arbitrary kernels.

    ``kernel_fn(y0, ys)`` is vectorised over leading axes.  Returns
    ``(out, covered, excluded)``.
    """
    m = len(ys_p)
    E = xp.shape[0]
    sizes = [len(w) for w in ys_w]
    out = np.zeros(E)
    covered = np.ones(E, dtype=bool)
    excluded = np.zeros(E, dtype=np.int64)
    if E == 0 or min(sizes) == 0:
        return out, covered, excluded
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    flat = [g.ravel() for g in grids]
    P = [ys_p[s][flat[s]] for s in range(m)]
    Q = [ys_q[s][flat[s]] for s in range(m)]
    W = np.prod([ys_w[s][flat[s]] for s in range(m)], axis=0)
    T = W.size
    step = max(1, chunk_elems // T)
    for lo in range(0, E, step):
        hi = min(E, lo + step)
        x = xp[lo:hi, None, :]
        xqq = xq[lo:hi, None, :]
        pts = [np.broadcast_to(p[None], (hi - lo, T, p.shape[1])) for p in P]
        qs = [np.broadcast_to(q_[None], (hi - lo, T, q_.shape[1])) for q_ in Q]
        args = [None] * (m + 1)
        qargs = [None] * (m + 1)
        args[swap] = np.broadcast_to(x, pts[0].shape)
        qargs[swap] = np.broadcast_to(xqq, qs[0].shape)
        for s in range(m):
            arg = s + 1 if s + 1 != swap else 0
            args[arg] = pts[s]
            qargs[arg] = qs[s]
        keep = np.ones((hi - lo, T), dtype=bool)
        if check:
            for p in range(m + 1):
                for p2 in range(p + 1, m + 1):
                    keep &= np.sum((qargs[p] - qargs[p2]) ** 2, axis=-1) >= thr2
        with np.errstate(divide="ignore", invalid="ignore"):
            kv = kernel_fn(args[0], args[1:])
        vals = np.where(keep, kv * W[None, :], 0.0)
        out[lo:hi] = vals.sum(axis=1)
        covered[lo:hi] = keep.any(axis=1)
        excluded[lo:hi] = (~keep).sum(axis=1)
    return out, covered, excluded


@njit(cache=True, nogil=True)
def maximal_values(xp, yp, yv, scales, norm, n, out):
    """``out[e] = max_k |sum_y phi_{t_k}(x_e - y) v_y|`` for the bump ``phi = norm (1 - |z|^2)^2``.

    ``yv`` already carries the cell volume; ``scales`` must be increasing.
    """
    E = xp.shape[0]
    S = yp.shape[0]
    K = scales.shape[0]
    acc = np.zeros(K)
    inv = np.empty(K)
    for k in range(K):
        inv[k] = norm / scales[k] ** n
    for e in range(E):
        for k in range(K):
            acc[k] = 0.0
        for s in range(S):
            d2 = 0.0
            for c in range(n):
                d = xp[e, c] - yp[s, c]
                d2 += d * d
            r = np.sqrt(d2)
            k0 = 0
            while k0 < K and scales[k0] <= r:
                k0 += 1
            for k in range(k0, K):
                z = d2 / (scales[k] * scales[k])
                w = 1.0 - z
                acc[k] += inv[k] * w * w * yv[s]
        best = 0.0
        for k in range(K):
            if abs(acc[k]) > best:
                best = abs(acc[k])
        out[e] = best
