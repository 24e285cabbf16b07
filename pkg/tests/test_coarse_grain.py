import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sausage_lab.coarse_grain import (
    MoeParams,
    _level,
    box_of,
    classify_bad_boxes,
    classify_density_boxes,
    coarse_grain,
    index_key,
    key_box,
    l_adic_box,
    scaled_unit_field,
    skeleton_capacity,
    truncate,
    volume_control_diagnostic,
)

P = MoeParams(0.1)


@given(st.floats(1e-6, 0.999), st.integers(2, 5))
def test_level_bracket(x, L):
    n = _level(x, L)
    assert float(L) ** (-n - 1) <= x < float(L) ** (-n)


def test_default_levels():
    assert (P.n_alpha, P.n_gamma, P.n_beta) == (0, 1, 2)
    q = P.with_epsilon(0.05)
    assert (q.n_alpha, q.n_gamma, q.n_beta) == (0, 2, 3)
    assert 4 * q.a * q.epsilon < 2.0 ** (-q.n_gamma)


def test_params_validation():
    with pytest.raises(ValueError):
        MoeParams(0.2)  # 4 a eps exceeds L^-n_gamma
    with pytest.raises(ValueError):
        MoeParams(0.1, alpha=0.6)
    with pytest.raises(ValueError):
        MoeParams(0.1, L=1)
    with pytest.raises(ValueError):
        MoeParams(0.1, delta=0.0)


def test_l_adic_boxes():
    b = l_adic_box([(0, 0)])
    assert b.lower == (0.0, 0.0) and b.upper == (1.0, 1.0)
    b = l_adic_box([(0, 0), (1, 1)], L=2)
    assert b.lower == (0.5, 0.5) and b.upper == (1.0, 1.0)
    with pytest.raises(ValueError):
        l_adic_box([(0, 0), (2, 0)], L=2)
    with pytest.raises(ValueError):
        l_adic_box([])


@given(
    st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=6),
    st.tuples(st.integers(-5, 5), st.integers(-5, 5)),
)
def test_truncation_nesting(digits, i0):
    L = 3
    index = [i0] + digits
    key = index_key(index, L)
    parent = truncate(key, key[0] - 1, L)
    assert parent == index_key(index[:-1], L)
    inner, outer = key_box(key, L), key_box(parent, L)
    assert all(o <= i + 1e-12 for o, i in zip(outer.lower, inner.lower))
    assert all(i <= o + 1e-12 for o, i in zip(outer.upper, inner.upper))


def test_boxes_half_open():
    assert box_of(np.array([[0.5, 0.25]]), 1).tolist() == [[1, 0]]


def test_skeleton_capacity_empty():
    assert skeleton_capacity(np.zeros((0, 2)), (1, (0, 0)), 1.0, 0.1) == 0.0
    assert skeleton_capacity(np.array([[0.9, 0.9]]), (1, (0, 0)), 1.0, 0.1) == 0.0


def test_skeleton_capacity_single_point_3d():
    k, eps = 2, 0.01
    cap = skeleton_capacity(np.array([[0.1, 0.1, 0.1]]), (k, (0, 0, 0)), 1.0, eps, n_walkers=40_000)
    assert cap == pytest.approx(2 * math.pi * 2**k * eps, rel=0.05)


def test_skeleton_capacity_monotone_under_unions():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.0, 0.5, size=(6, 2))
    caps = [skeleton_capacity(pts[:n], (1, (0, 0)), 1.0, 0.02) for n in range(1, 7)]
    assert all(b >= a * (1 - 1e-2) for a, b in zip(caps, caps[1:]))


def test_truncation_consistency():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 1, size=(40, 2))
    key = (1, (0, 1))
    restricted = pts[np.all(box_of(pts, 1) == (0, 1), axis=1)]
    assert skeleton_capacity(pts, key, 1.0, 0.05) == skeleton_capacity(restricted, key, 1.0, 0.05)


def test_empty_field_classification():
    assert classify_density_boxes(np.zeros((0, 2)), P) == set()
    assert classify_bad_boxes(np.zeros((0, 2)), P, set()) == set()


def _cluster():
    g = np.linspace(0.05, 0.45, 9)
    return np.array([(x, y) for x in g for y in g])


def test_dense_cluster_is_density_box():
    pts = _cluster()
    total = skeleton_capacity(pts, (1, (0, 0)), 1.0, 0.1)
    dense = classify_density_boxes(pts, MoeParams(0.1, delta=0.9 * total))
    assert (1, (0, 0)) in dense
    assert classify_bad_boxes(pts, MoeParams(0.1, delta=0.9 * total), dense) == set()


def test_isolated_point_fails_criterion():
    pts = np.array([[0.7, 0.2]])
    total = skeleton_capacity(pts, (1, (1, 0)), 1.0, 0.1)
    params = MoeParams(0.1, delta=1.1 * total)
    dense = classify_density_boxes(pts, params)
    assert dense == set()
    assert classify_bad_boxes(pts, params, dense) == {(2, (2, 0))}
    below = MoeParams(0.1, delta=0.9 * total)
    assert classify_density_boxes(pts, below) == {(1, (1, 0))}


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.05]), st.floats(0.5, 8.0))
def test_disjoint_and_covering(seed, eps, delta):
    params = MoeParams(eps, delta=delta)
    pts = scaled_unit_field(1.0, eps, 2, seed)
    res = coarse_grain(pts, params)
    assert res.disjoint() and res.covered()
    assert res.bad_volume <= len(pts) * 2.0 ** (-2 * params.n_beta) + 1e-15


def test_classification_deterministic():
    pts = scaled_unit_field(1.0, 0.1, 2, 5)
    a, b = coarse_grain(pts, P), coarse_grain(pts.copy(), P)
    assert a.density_boxes == b.density_boxes and a.bad_boxes == b.bad_boxes
    assert a.to_csv() == b.to_csv()


def test_scaled_field_shared_realization():
    coarse = scaled_unit_field(1.0, 0.1, 2, 7, extent=20.0)
    fine = scaled_unit_field(1.0, 0.05, 2, 7, extent=20.0)
    a = coarse / 0.1
    b = fine / 0.05
    b = b[np.all(b < 10.0, axis=1)]
    # the eps = 0.1 window is the [0, 10)^2 corner of the eps = 0.05 window
    assert np.allclose(a[np.lexsort(a.T)], b[np.lexsort(b.T)])


def test_volume_control_zero_intensity():
    rows = volume_control_diagnostic(0.0, [0.1, 0.05], 0.2, 3)
    assert all(r["max_statistic"] == 0 and r["mean_statistic"] == 0 for r in rows)


def test_volume_control_validation():
    with pytest.raises(ValueError):
        volume_control_diagnostic(1.0, [0.05, 0.1], 0.2, 2)
    with pytest.raises(ValueError):
        volume_control_diagnostic(1.0, [0.1, 0.05], 0.0, 2)
