import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from weakfactor.errors import CoverageWarning, PreconditionError
from weakfactor.grid import Ball, Box, GridFn, GridSpec, ball_indicator, inner, integrate, make_grid_fn, zeros
from weakfactor.kernels import KernelDescriptor, evaluate, riesz
from weakfactor.operators import (
    OperatorConfig,
    OperatorStats,
    apply_partial_adjoint,
    apply_T,
    commutator_apply,
    duality_defect,
    evaluate_at,
    evaluate_points,
    pi_apply,
)


def cfg_for(m=1, n=1, half=4.0, N=64, **kw):
    return OperatorConfig(riesz(m, n), GridSpec(Box([0.0] * n, [half]), N), **kw)


def random_fns(spec, count, seed, density=0.5):
    rng = np.random.default_rng(seed)
    return [GridFn(spec, rng.standard_normal(spec.size) * (rng.random(spec.size) < density)) for _ in range(count)]


# ---------------------------------------------------------------- config


def test_default_exclusion_is_one_spacing():
    cfg = cfg_for()
    assert cfg.delta == cfg.eval_mesh.spacing


def test_exclusion_below_half_spacing_rejected():
    with pytest.raises(PreconditionError):
        cfg_for(exclusion_radius=0.01)


def test_grid_mismatch_rejected():
    cfg = cfg_for()
    other = zeros(GridSpec(Box([0.0], [2.0]), 64))
    with pytest.raises(PreconditionError):
        apply_T(cfg, [other])


# ---------------------------------------------------------------- apply_T


def test_zero_operand_gives_zero():
    cfg = cfg_for(2, N=24)
    f = ball_indicator(Ball([0.0], 1.0), cfg.eval_mesh)
    assert not apply_T(cfg, [f, zeros(cfg.eval_mesh)]).flat.any()


def test_hilbert_of_indicator_outside():
    # 64 cells across [-1, 1]
    cfg = cfg_for(half=4.0, N=256)
    f = ball_indicator(Ball([0.0], 1.0), cfg.eval_mesh)
    got = evaluate_points(cfg, [f], [3.0])[0]
    assert got == pytest.approx(oracles.log_potential(3.0, -1.0, 1.0), rel=0.01)
    assert got == pytest.approx(math.log(2.0), rel=0.01)


def test_bilinear_separated_balls_closed_form():
    spec = GridSpec(Box([20.0], [22.0]), 44 * 8)
    cfg = OperatorConfig(riesz(2, 1), spec)
    fs = [ball_indicator(Ball([0.0], 1.0), spec), ball_indicator(Ball([40.0], 1.0), spec)]
    got = evaluate_points(cfg, fs, [20.0])[0]
    exact = oracles.bilinear_box(20.0, (-1.0, 1.0), (39.0, 41.0))
    assert exact == pytest.approx(oracles.bilinear_box_quad(20.0, (-1.0, 1.0), (39.0, 41.0)), rel=1e-10)
    assert got == pytest.approx(exact, rel=0.01)
    # brute-force double sum at 4x resolution
    cells = 64
    pts0 = [-1 + (k + 0.5) * 2 / cells for k in range(cells)]
    pts1 = [39 + (k + 0.5) * 2 / cells for k in range(cells)]
    w = [[2 / cells] * cells] * 2
    brute = oracles.riesz_tuple_sum(20.0, w, [pts0, pts1])
    assert got == pytest.approx(brute, rel=0.01)


def test_matches_brute_force_with_exclusion():
    spec = GridSpec(Box([0.0], [1.0]), 10)
    cfg = OperatorConfig(riesz(2, 1), spec, exclusion_radius=1.5 * spec.spacing)
    f1, f2 = random_fns(spec, 2, seed=5, density=1.0)
    got = apply_T(cfg, [f1, f2]).flat
    xs = spec.centers[:, 0].tolist()
    h = spec.spacing
    for k, x in enumerate(xs):
        ref = oracles.riesz_tuple_sum(
            x, [(f1.flat * h).tolist(), (f2.flat * h).tolist()], [xs, xs], exclude=1.5 * h
        )
        assert got[k] == pytest.approx(ref, rel=1e-12, abs=1e-13)


def test_numpy_path_agrees_with_compiled_path():
    spec = GridSpec(Box([0.0, 0.0], [1.0]), 8)
    base = riesz(2, 2, j=2, i=2)
    custom = KernelDescriptor("custom", 2, 2, 2, 2, custom_eval=lambda y0, ys: evaluate(base, y0, ys))
    fs = random_fns(spec, 2, seed=1)
    a = apply_T(OperatorConfig(base, spec), fs).flat
    b = apply_T(OperatorConfig(custom, spec), fs).flat
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    for l in (1, 2):
        a = apply_partial_adjoint(OperatorConfig(base, spec), l, fs).flat
        b = apply_partial_adjoint(OperatorConfig(custom, spec), l, fs).flat
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_sparse_evaluation_equals_dense():
    cfg = cfg_for(2, N=24)
    f1, f2 = random_fns(cfg.eval_mesh, 2, seed=8, density=0.3)
    dense = apply_T(cfg, [f1, f2]).flat
    at = np.array([3, 11, 17])
    assert np.array_equal(evaluate_at(cfg, [f1, f2], at), dense[at])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_multilinear_in_each_slot(seed, a, b):
    cfg = cfg_for(2, N=16)
    f, g, h = random_fns(cfg.eval_mesh, 3, seed)
    lhs = apply_T(cfg, [a * f + b * g, h]).flat
    rhs = a * apply_T(cfg, [f, h]).flat + b * apply_T(cfg, [g, h]).flat
    scale = 1 + np.max(np.abs(rhs))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale * (1 + abs(a) + abs(b))
    lhs = apply_T(cfg, [h, a * f + b * g]).flat
    rhs = a * apply_T(cfg, [h, f]).flat + b * apply_T(cfg, [h, g]).flat
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale * (1 + abs(a) + abs(b))


def test_all_tuples_excluded_warns_and_zeroes():
    spec = GridSpec(Box([0.0], [1.0]), 8)
    cfg = OperatorConfig(riesz(1, 1), spec)
    v = np.zeros(8)
    v[3] = 1.0
    with pytest.warns(CoverageWarning):
        out = evaluate_at(cfg, [GridFn(spec, v)], np.array([3]))
    assert out[0] == 0.0


def test_stats_record_exclusions():
    cfg = cfg_for(N=16)
    stats = OperatorStats()
    apply_T(cfg, random_fns(cfg.eval_mesh, 1, 0, density=1.0), stats=stats)
    assert stats.calls == 1 and stats.exclusion_fired


def test_results_do_not_depend_on_workers():
    cfg = cfg_for(2, N=40)
    fs = random_fns(cfg.eval_mesh, 2, 2)
    a = apply_T(cfg, fs).flat
    b = apply_T(cfg.with_workers(4), fs).flat
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- partial adjoint


def test_m1_adjoint_is_negative_T():
    cfg = cfg_for(N=48)
    (f,) = random_fns(cfg.eval_mesh, 1, 3)
    assert np.array_equal(apply_partial_adjoint(cfg, 1, [f]).flat, -apply_T(cfg, [f]).flat)


def test_adjoint_m2_l2_against_brute_force():
    spec = GridSpec(Box([10.0], [14.0]), 28 * 8)
    cfg = OperatorConfig(riesz(2, 1), spec)
    f1 = ball_indicator(Ball([0.0], 1.0), spec)
    f2 = ball_indicator(Ball([20.0], 1.0), spec)
    got = evaluate_points(cfg, [f1, f2], [10.0], swap=2)[0]
    cells = 32
    p1 = [-1 + (k + 0.5) * 2 / cells for k in range(cells)]
    p2 = [19 + (k + 0.5) * 2 / cells for k in range(cells)]
    h = 2 / cells
    # kernel arguments (y2, y1, x)
    brute = math.fsum(oracles.riesz_value([y2], [[y1], [10.0]]) * h * h for y1 in p1 for y2 in p2)
    assert got == pytest.approx(brute, rel=0.01)


@pytest.mark.parametrize("m,l", [(1, 1), (2, 1), (2, 2)])
def test_discrete_fubini(m, l):
    cfg = cfg_for(m, N=20 if m == 2 else 64)
    g, *hs = random_fns(cfg.eval_mesh, m + 1, seed=m + l)
    swapped = list(hs)
    swapped[l - 1] = g
    lhs = inner(hs[l - 1], apply_partial_adjoint(cfg, l, swapped))
    rhs = inner(g, apply_T(cfg, hs))
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


def test_slot_out_of_range():
    cfg = cfg_for(2, N=8)
    with pytest.raises(PreconditionError):
        apply_partial_adjoint(cfg, 3, random_fns(cfg.eval_mesh, 2, 0))


# ---------------------------------------------------------------- commutator


def test_commutator_with_constant_vanishes():
    cfg = cfg_for(2, N=20)
    fs = random_fns(cfg.eval_mesh, 2, 4)
    two = make_grid_fn(cfg.eval_mesh, lambda x: np.full(len(x), 2.0))
    assert not commutator_apply(cfg, 1, two, fs).flat.any()
    three = two * 1.5
    out = commutator_apply(cfg, 2, three, fs).flat
    assert np.max(np.abs(out)) <= 1e-13 * np.max(np.abs(apply_T(cfg, fs).flat))


def test_commutator_linear_in_b():
    cfg = cfg_for(N=48)
    b1, b2, f = random_fns(cfg.eval_mesh, 3, 6)
    lhs = commutator_apply(cfg, 1, b1 + b2, [f]).flat
    rhs = commutator_apply(cfg, 1, b1, [f]).flat + commutator_apply(cfg, 1, b2, [f]).flat
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(rhs)))


def test_commutator_sign_log_oracle():
    spec = GridSpec(Box([0.0], [4.0]), 256)
    cfg = OperatorConfig(riesz(1, 1), spec)
    b = make_grid_fn(spec, lambda x: np.sign(x[:, 0]))
    f = ball_indicator(Ball([1.5], 0.5), spec)
    at = np.array([int(np.argmin(np.abs(spec.centers[:, 0] + 3.0 - spec.spacing / 2)))])
    x = float(spec.centers[at[0], 0])
    got = commutator_apply(cfg, 1, b, [f], at=at).flat[at[0]]
    exact = 2 * oracles.log_potential(x, 1.0, 2.0)
    assert got == pytest.approx(exact, rel=0.01)
    assert 2 * math.log(4 / 5) == pytest.approx(-0.4463, abs=1e-4)


# ---------------------------------------------------------------- Pi


@pytest.mark.parametrize("m,l", [(1, 1), (2, 1), (2, 2)])
def test_pi_cancellation_and_duality(m, l):
    cfg = cfg_for(m, N=24 if m == 2 else 64)
    b, g, *hs = random_fns(cfg.eval_mesh, m + 2, seed=10 * m + l)
    d = duality_defect(cfg, l, b, g, hs)
    assert d["pairing"] <= 1e-10 * d["scale"]
    assert d["cancellation"] <= 1e-10 * d["scale"]


def test_pi_duality_survives_large_exclusion():
    spec = GridSpec(Box([0.0], [2.0]), 48)
    cfg = OperatorConfig(riesz(2, 1), spec, exclusion_radius=3 * spec.spacing)
    b, g, h1, h2 = random_fns(spec, 4, seed=2, density=1.0)
    d = duality_defect(cfg, 2, b, g, [h1, h2])
    assert d["pairing"] <= 1e-10 * d["scale"]


def test_pi_with_g_and_hl_zero():
    cfg = cfg_for(2, N=16)
    (h2,) = random_fns(cfg.eval_mesh, 1, 0)
    z = zeros(cfg.eval_mesh)
    assert not pi_apply(cfg, 1, z, [z, h2]).flat.any()


def test_pi_matches_definition():
    cfg = cfg_for(2, N=16)
    g, h1, h2 = random_fns(cfg.eval_mesh, 3, 9)
    direct = h2 * apply_partial_adjoint(cfg, 2, [h1, g]) - g * apply_T(cfg, [h1, h2])
    assert np.allclose(pi_apply(cfg, 2, g, [h1, h2]).flat, direct.flat, rtol=0, atol=1e-12)


def test_integral_of_pi_indicators_is_zero():
    cfg = cfg_for(N=64)
    spec = cfg.eval_mesh
    g = ball_indicator(Ball([2.0], 0.5), spec)
    h = ball_indicator(Ball([-2.0], 0.5), spec)
    assert abs(integrate(pi_apply(cfg, 1, g, [h]))) <= 1e-14
