"""Reference values computed without the package.

Closed forms, brute-force loops and mpmath quadrature, kept independent of
the code under test so that tests compare two separate computations.
"""
import itertools
import math

import mpmath


def riesz_value(x, ys, j=1, i=1):
    """Direct formula for the Riesz kernel, plain Python floats."""
    x = [float(v) for v in x]
    ys = [[float(v) for v in y] for y in ys]
    m, n = len(ys), len(x)
    sq = sum((x[c] - y[c]) ** 2 for y in ys for c in range(n))
    return (x[i - 1] - ys[j - 1][i - 1]) / sq ** ((m * n + 1) / 2)


def log_potential(x, a, b):
    """Principal value of the integral of ``1/(x - y)`` over ``[a, b]``."""
    return math.log(abs((x - a) / (x - b)))


def adjoint_log_potential(x, a, b):
    """The same integral with the roles of x and y swapped: ``1/(y - x)``."""
    return -log_potential(x, a, b)


def bilinear_box(x, box1, box2):
    """Bilinear Riesz transform (n=1, j=1) of ``chi_box1 x chi_box2`` at x.

    Integrating ``u / (u^2 + v^2)^(3/2)`` first in ``u = x - y1`` and then in
    ``v = x - y2`` gives differences of ``asinh(v / |u|)`` at the corners.
    Valid for x outside ``box1``.
    """
    (a1, b1), (a2, b2) = box1, box2
    u_lo, u_hi = x - b1, x - a1
    v_lo, v_hi = x - b2, x - a2

    def F(u, v):
        return math.asinh(v / abs(u))

    return -(F(u_hi, v_hi) - F(u_hi, v_lo)) + (F(u_lo, v_hi) - F(u_lo, v_lo))


def bilinear_box_quad(x, box1, box2):
    """mpmath double quadrature of the same integral (slow, independent check)."""
    (a1, b1), (a2, b2) = box1, box2
    f = lambda y1, y2: (x - y1) / ((x - y1) ** 2 + (x - y2) ** 2) ** 1.5
    return float(mpmath.quad(f, [a1, b1], [a2, b2]))


def ordered_pair_sum(points):
    return sum(math.dist(p, q) for p in points for q in points)


def bmo_bruteforce(values):
    """Largest mean oscillation over all windows of dyadic length in a 1-d array."""
    N = len(values)
    best = 0.0
    s = 1
    while s <= N:
        for lo in range(N - s + 1):
            w = values[lo : lo + s]
            mu = sum(w) / s
            best = max(best, sum(abs(v - mu) for v in w) / s)
        s *= 2
    return best


def bump_mass(n):
    """Mass of ``(1 - |z|^2)^2`` on the unit ball of R^n by mpmath."""
    sphere = 2 * mpmath.pi ** (n / 2) / mpmath.gamma(n / 2)
    return float(sphere * mpmath.quad(lambda t: (1 - t * t) ** 2 * t ** (n - 1), [0, 1]))


def chain_atom_count(D, r):
    return math.ceil(math.log2(D / r)) + 2


def midpoint_sum_1d(f, a, b, cells):
    h = (b - a) / cells
    return math.fsum(f(a + (k + 0.5) * h) for k in range(cells)) * h


def riesz_tuple_sum(x, weights_per_slot, points_per_slot, j=1, exclude=0.0):
    """Brute-force m-linear tuple sum in 1-d, skipping near-diagonal tuples."""
    total = []
    for combo in itertools.product(*[range(len(p)) for p in points_per_slot]):
        ys = [points_per_slot[s][k] for s, k in enumerate(combo)]
        pts = [x] + ys
        if min(abs(p - q) for p, q in itertools.combinations(pts, 2)) < exclude:
            continue
        w = math.prod(weights_per_slot[s][k] for s, k in enumerate(combo))
        total.append(riesz_value([x], [[y] for y in ys], j=j) * w)
    return math.fsum(total)
