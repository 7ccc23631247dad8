import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakfactor.errors import PaddingError, PreconditionError, ResolutionWarning
from weakfactor.grid import (
    Ball,
    Box,
    GridFn,
    GridSpec,
    ball_indicator,
    grid_covering,
    inner,
    integrate,
    lp_norm,
    make_grid_fn,
    zeros,
)


def line(half=1.0, N=8, center=0.0):
    return GridSpec(Box([center], [half]), N)


# ---------------------------------------------------------------- make_grid_fn


def test_zero_sampler_gives_zero_function():
    f = make_grid_fn(line(), lambda x: np.zeros(len(x)))
    assert np.all(f.flat == 0)


def test_constant_sampler():
    f = make_grid_fn(line(N=8), lambda x: np.ones(len(x)))
    assert f.flat.tolist() == [1.0] * 8


def test_identity_sampler_hits_cell_centres():
    f = make_grid_fn(line(N=4), lambda x: x[:, 0])
    assert f.flat.tolist() == [-0.75, -0.25, 0.25, 0.75]


def test_scalar_sampler_is_vectorised():
    f = make_grid_fn(line(N=4), lambda x: float(x) * 2)
    assert f.flat.tolist() == [-1.5, -0.5, 0.5, 1.5]


def test_non_finite_sample_names_the_cell():
    with pytest.raises(ValueError, match=r"cell \(2,\)"):
        make_grid_fn(line(N=4), lambda x: np.where(x[:, 0] == 0.25, np.inf, 0.0))


def test_values_are_read_only():
    f = zeros(line())
    with pytest.raises(ValueError):
        f.values[0] = 1.0


# ---------------------------------------------------------------- spec


def test_spec_geometry():
    spec = GridSpec(Box([0.0, 0.0], [2.0]), 16)
    assert spec.size == 256 and spec.shape == (16, 16)
    assert spec.spacing == 0.25 and spec.cell_volume == 0.0625
    c = spec.centers
    assert c.shape == (256, 2)
    assert c.min() == -1.875 and c.max() == 1.875


def test_spec_rejects_few_points_and_non_cubic_boxes():
    with pytest.raises(ValueError):
        GridSpec(Box([0.0], [1.0]), 3)
    with pytest.raises(ValueError):
        GridSpec(Box([0.0, 0.0], [1.0, 2.0]), 8)


def test_header_round_trip():
    spec = GridSpec(Box([0.5, -1.0], [3.0]), 12)
    assert GridSpec.from_header(spec.header()) == spec


def test_text_round_trip_is_exact():
    rng = np.random.default_rng(3)
    spec = GridSpec(Box([0.1, 0.2], [1.3]), 7)
    f = GridFn(spec, rng.standard_normal(spec.size))
    g = GridFn.from_text(f.to_text())
    assert g.spec == spec and np.array_equal(g.values, f.values)


def test_csv_export_uses_crlf_and_centres():
    text = make_grid_fn(line(N=4), lambda x: x[:, 0]).to_csv()
    assert text.startswith("x1,value\r\n-0.75,-0.75\r\n")


def test_require_ball_reports_padding():
    spec = line(half=4.0, N=32)
    spec.require_ball(Ball([0.0], 1.0), padding=2.0)
    with pytest.raises(PaddingError, match="half width"):
        spec.require_ball(Ball([0.0], 1.0), padding=3.5)


def test_grid_covering_aligns_cells_with_anchor():
    spec = grid_covering([Ball([0.0], 1.0), Ball([10.0], 1.0)], 0.125, 1.0, anchor=[0.0])
    edges = spec.centers[:, 0] - spec.spacing / 2
    assert np.any(np.isclose(edges, 0.0, atol=1e-12))
    assert spec.contains_ball(Ball([10.0], 1.0), padding=1.0)
    assert spec.contains_ball(Ball([0.0], 1.0), padding=1.0)


# ---------------------------------------------------------------- integrate


@pytest.mark.parametrize("N", [4, 9, 64])
def test_integral_of_constant_is_exact(N):
    assert integrate(make_grid_fn(line(N=N), lambda x: np.ones(len(x)))) == 2.0


def test_odd_function_integrates_to_zero():
    f = make_grid_fn(line(N=1000), lambda x: x[:, 0])
    assert abs(integrate(f)) <= 1000 * np.finfo(float).eps


def test_disc_area():
    spec = GridSpec(Box([0.0, 0.0], [2.0]), 256)
    assert integrate(ball_indicator(Ball([0.0, 0.0], 1.0), spec)) == pytest.approx(math.pi, rel=0.02)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_integrate_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    spec = line(N=33)
    f = GridFn(spec, rng.standard_normal(33))
    g = GridFn(spec, rng.standard_normal(33))
    lhs = integrate(a * f + b * g)
    rhs = a * integrate(f) + b * integrate(g)
    assert abs(lhs - rhs) <= 1e-13 * (1 + abs(a) + abs(b)) * 33


# ---------------------------------------------------------------- lp_norm


@pytest.mark.parametrize("p", [1, 2, 3.5])
def test_constant_norm(p):
    spec = line(half=1.5, N=12)
    f = make_grid_fn(spec, lambda x: np.full(len(x), -2.0))
    assert lp_norm(f, p) == pytest.approx(2.0 * 3.0 ** (1 / p), rel=1e-14)


def test_sup_norm_of_identity():
    assert lp_norm(make_grid_fn(line(N=4), lambda x: x[:, 0]), math.inf) == 0.75


def test_l2_norm_of_indicator():
    spec = line(half=2.0, N=64)
    assert lp_norm(ball_indicator(Ball([0.0], 1.0), spec), 2) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_p_below_one_rejected():
    with pytest.raises(ValueError):
        lp_norm(zeros(line()), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.1, 6.0), st.floats(1.1, 6.0))
def test_holder_inequality(seed, p1, p2):
    rng = np.random.default_rng(seed)
    spec = line(N=40)
    f = GridFn(spec, rng.standard_normal(40))
    g = GridFn(spec, rng.standard_normal(40))
    p = 1.0 / (1.0 / p1 + 1.0 / p2)
    if p < 1:
        return
    assert lp_norm(f * g, p) <= lp_norm(f, p1) * lp_norm(g, p2) * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1.0, 2.0, 4.0, math.inf]))
def test_norm_is_monotone(seed, p):
    rng = np.random.default_rng(seed)
    spec = line(N=25)
    g = GridFn(spec, rng.standard_normal(25))
    f = g * GridFn(spec, rng.uniform(-1, 1, 25))
    assert lp_norm(f, p) <= lp_norm(g, p) * (1 + 1e-13)


def test_large_p_does_not_overflow():
    f = make_grid_fn(line(N=8), lambda x: np.full(len(x), 1e200))
    assert math.isfinite(lp_norm(f, 4))


# ---------------------------------------------------------------- ball_indicator


def test_indicator_covering_box():
    assert ball_indicator(Ball([0.0], 1.0), line(N=8)).flat.tolist() == [1.0] * 8


def test_indicator_pattern():
    f = ball_indicator(Ball([0.0], 1.0), line(half=2.0, N=8))
    assert f.flat.tolist() == [0, 0, 1, 1, 1, 1, 0, 0]


def test_tiny_ball_between_centres_warns():
    with pytest.warns(ResolutionWarning):
        f = ball_indicator(Ball([0.0], 0.1), line(N=8))
    assert not f.flat.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(0.05, 3))
def test_indicator_values_are_binary(c, r):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        f = ball_indicator(Ball([c, -c], r), GridSpec(Box([0.0, 0.0], [2.0]), 16))
    assert set(np.unique(f.flat)) <= {0.0, 1.0}


def test_mixing_grids_is_rejected():
    with pytest.raises(PreconditionError):
        inner(zeros(line(N=8)), zeros(line(N=8, half=2.0)))
