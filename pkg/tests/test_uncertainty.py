"""Disturbance-set estimation, down-sampling, and vertex enumeration."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdeepc import uncertainty as un


# ------------------------------------------------------------- estimators


def test_constant_bounds_frozen_example():
    # history (0, 1, 2): spread 1 around the mean, anchored at the last sample
    poly = un.estimate_constant_bounds(np.array([0.0, 1.0, 2.0]), 2)
    assert np.allclose(poly.lower, [1.0, 1.0])
    assert np.allclose(poly.upper, [3.0, 3.0])
    assert poly.ts is None and poly.interp is None


def test_timevarying_bounds_frozen_example():
    # history (0, 1, 3), dt=1: rates (1, 2), current rate 2, rate spread 0.5
    poly = un.estimate_timevarying_bounds(np.array([0.0, 1.0, 3.0]), 2, 1.0)
    assert np.allclose(poly.lower, [4.5, 6.0])
    assert np.allclose(poly.upper, [5.5, 8.0])


def test_constant_bounds_contain_last_sample():
    rng = np.random.default_rng(2)
    for _ in range(20):
        hist = rng.normal(size=rng.integers(1, 30))
        poly = un.estimate_constant_bounds(hist, 5)
        assert np.all(poly.lower <= hist[-1] + 1e-12)
        assert np.all(poly.upper >= hist[-1] - 1e-12)


def test_estimator_validation():
    with pytest.raises(ValueError):
        un.estimate_constant_bounds(np.array([]), 2)
    with pytest.raises(ValueError):
        un.estimate_constant_bounds(np.array([1.0]), 0)
    with pytest.raises(ValueError):
        un.estimate_timevarying_bounds(np.array([0.0, 1.0]), 2, 1.0)
    with pytest.raises(ValueError):
        un.estimate_timevarying_bounds(np.array([0.0, 1.0, 2.0]), 2, 0.0)


# ---------------------------------------------------------- down-sampling


def test_downsample_map_frozen_example():
    n, interp = un.downsample_map(4, 2)
    assert n == 3
    assert np.allclose(interp, [[1.0, 0.0, 0.0],
                                [0.5, 0.5, 0.0],
                                [0.0, 1.0, 0.0],
                                [0.0, 0.0, 1.0]])


def test_downsample_stride_validation():
    with pytest.raises(ValueError):
        un.downsample_map(4, 0)
    with pytest.raises(ValueError):
        un.downsample_map(4, 5)


@given(st.integers(2, 60).flatmap(
    lambda h: st.tuples(st.just(h), st.integers(1, h))))
def test_downsample_map_properties(dims):
    horizon, ts = dims
    n, interp = un.downsample_map(horizon, ts)
    assert n == (horizon - 2) // ts + 2
    assert interp.shape == (horizon, n)
    assert np.all(interp >= 0)
    assert np.allclose(interp.sum(axis=1), 1.0)
    # anchor rows are one-hot at the anchor steps
    steps = un.anchor_steps(horizon, ts)
    assert len(steps) == n
    assert steps[0] == 0 and steps[-1] == horizon - 1
    for j, k in enumerate(steps):
        row = np.zeros(n)
        row[j] = 1.0
        assert np.allclose(interp[k], row)


def test_apply_downsampling_takes_anchor_bounds():
    full = un.DisturbancePolytope(np.arange(10.0) - 5, np.arange(10.0) + 5)
    small = un.apply_downsampling(full, 4)
    steps = un.anchor_steps(10, 4)
    assert np.array_equal(steps, [0, 4, 8, 9])
    assert np.allclose(small.lower, full.lower[steps])
    assert np.allclose(small.upper, full.upper[steps])
    assert small.ts == 4
    assert small.interp.shape == (10, 4)


@pytest.mark.parametrize("estimator", ["constant", "timevarying"])
def test_downsampled_set_maps_into_full_set(estimator):
    rng = np.random.default_rng(9)
    hist = np.cumsum(rng.uniform(-0.3, 0.5, 25))
    horizon, ts = 12, 5
    if estimator == "constant":
        full = un.estimate_constant_bounds(hist, horizon)
    else:
        full = un.estimate_timevarying_bounds(hist, horizon, 0.05)
    small = un.apply_downsampling(full, ts)
    pts = small.sample(rng, 200)
    for pt in pts:
        lifted = small.expand(pt)
        assert np.all(lifted >= full.lower - 1e-9)
        assert np.all(lifted <= full.upper + 1e-9)


# -------------------------------------------------------------- polytopes


def test_polytope_validation():
    with pytest.raises(ValueError):
        un.DisturbancePolytope(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        un.DisturbancePolytope(np.array([0.0, 1.0]), np.array([1.0]))


def test_contains_and_sample():
    poly = un.DisturbancePolytope(np.array([-1.0, 2.0]), np.array([1.0, 3.0]))
    assert poly.contains(np.array([0.0, 2.5]))
    assert not poly.contains(np.array([0.0, 3.5]))
    rng = np.random.default_rng(4)
    pts = poly.sample(rng, 50)
    assert pts.shape == (50, 2)
    assert np.all(pts >= poly.lower) and np.all(pts <= poly.upper)


def test_vertex_enumeration_order():
    poly = un.DisturbancePolytope(np.array([-1.0, 2.0]), np.array([1.0, 3.0]))
    verts = un.enumerate_vertices(poly)
    assert np.array_equal(verts, [[-1.0, 2.0],
                                  [-1.0, 3.0],
                                  [1.0, 2.0],
                                  [1.0, 3.0]])
    assert poly.vertex_count() == 4


def test_vertex_enumeration_collapses_degenerate_axes():
    poly = un.DisturbancePolytope(np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    verts = un.enumerate_vertices(poly)
    assert np.array_equal(verts, [[-1.0, 0.0], [1.0, 0.0]])
    assert poly.vertex_count() == 2


def test_vertex_cap_enforced():
    wide = un.DisturbancePolytope(-np.ones(13), np.ones(13))
    with pytest.raises(ValueError):
        un.enumerate_vertices(wide)


def test_expand_identity_without_interp():
    poly = un.DisturbancePolytope(np.array([-1.0]), np.array([1.0]))
    assert poly.expand(np.array([0.3])) == pytest.approx(0.3)


def test_inequality_form_halfspaces():
    poly = un.DisturbancePolytope(np.array([-1.0, 2.0]), np.array([1.0, 3.0]))
    A, b = poly.inequality_form()
    pt_in = np.array([0.5, 2.5])
    pt_out = np.array([0.5, 3.5])
    assert np.all(A @ pt_in <= b + 1e-12)
    assert np.any(A @ pt_out > b)
