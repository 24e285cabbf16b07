import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sausage_lab.brownian import simulate_path
from sausage_lab.sausage import ballistic_lower_bound, sausage_volume_grid, sausage_volume_mc

RHO = 0.5
DISK = math.pi * RHO**2
STADIUM = 2 * RHO * 2 + math.pi * RHO**2


def _random_path(seed, n=10, d=2, scale=1.0):
    steps = np.random.default_rng(seed).normal(scale=scale, size=(n, d))
    return np.vstack([np.zeros(d), np.cumsum(steps, axis=0)])


def test_single_point_disk():
    est = sausage_volume_grid(np.zeros((1, 2)), RHO, RHO / 32)
    assert est.volume == pytest.approx(DISK, rel=0.02)


def test_segment_stadium():
    seg = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert sausage_volume_grid(seg, RHO).volume == pytest.approx(STADIUM, rel=0.02)


def test_capsule_3d():
    seg = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    exact = math.pi * RHO**2 * 2 + 4 / 3 * math.pi * RHO**3
    assert sausage_volume_grid(seg, RHO, RHO / 8).volume == pytest.approx(exact, rel=0.03)


def test_grid_rejects_coarse_spacing():
    with pytest.raises(ValueError):
        sausage_volume_grid(np.zeros((1, 2)), RHO, RHO / 2)
    with pytest.raises(ValueError):
        sausage_volume_grid(np.zeros((1, 2)), 0.0)


def test_grid_refinement_self_consistency():
    path = _random_path(3)
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
    perimeter = 2 * length + 2 * math.pi * RHO
    h = RHO / 8
    v1 = sausage_volume_grid(path, RHO, h).volume
    v2 = sausage_volume_grid(path, RHO, h / 2).volume
    assert abs(v1 - v2) <= 3 * h * perimeter


def test_mc_single_point():
    est = sausage_volume_mc(np.zeros((1, 2)), RHO, 100_000, seed=1)
    assert abs(est.volume - DISK) <= 3 * est.stderr
    assert est.method == "hit_or_miss"


def test_mc_stderr_rate():
    path = _random_path(4)
    a = sausage_volume_mc(path, RHO, 100_000, seed=2).stderr
    b = sausage_volume_mc(path, RHO, 200_000, seed=2).stderr
    assert a / b == pytest.approx(math.sqrt(2), rel=0.1)


def test_mc_validation():
    with pytest.raises(ValueError):
        sausage_volume_mc(np.zeros((1, 2)), RHO, 999)
    with pytest.raises(ValueError):
        sausage_volume_mc(np.zeros((1, 2)), 0.0, 1000)


def test_grid_agrees_with_mc_on_brownian_paths():
    for i in range(5):
        path = simulate_path(1.0, 1e-2, 2, seed=100 + i)
        g = sausage_volume_grid(path, RHO).volume
        m = sausage_volume_mc(path, RHO, 50_000, seed=i)
        assert abs(g - m.volume) <= 3 * m.stderr + 0.01 * g


def test_ballistic_bound_cases():
    assert ballistic_lower_bound(np.zeros((1, 2)), RHO, [1.0, 0.0]) == 0.0
    seg = np.array([[0.0, 0.0], [2.0, 0.0]])
    bound = ballistic_lower_bound(seg, RHO, [1.0, 0.0])
    assert bound == pytest.approx(2 * RHO * 2)
    assert STADIUM - bound == pytest.approx(math.pi * RHO**2)
    with pytest.raises(ValueError):
        ballistic_lower_bound(seg, RHO, [0.0, 0.0])


def test_ballistic_bound_below_grid_volume():
    rng = np.random.default_rng(8)
    for i in range(50):
        path = _random_path(1000 + i, n=8)
        u = rng.normal(size=2)
        assert ballistic_lower_bound(path, RHO, u) <= 1.03 * sausage_volume_grid(path, RHO, RHO / 8).volume


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_extension_never_decreases_volume(seed, extra):
    path = _random_path(seed, n=6)
    longer = np.vstack([path, path[-1] + np.cumsum(np.random.default_rng(seed + 1).normal(size=(extra, 2)), axis=0)])
    h = RHO / 8
    assert sausage_volume_grid(longer, RHO, h).volume >= sausage_volume_grid(path, RHO, h).volume - 1e-12


@given(st.integers(0, 10_000), st.floats(0, 2 * math.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_isometry_invariance(seed, angle, tx, ty):
    path = _random_path(seed, n=6)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    moved = path @ rot.T + np.array([tx, ty])
    h = RHO / 16
    v1 = sausage_volume_grid(path, RHO, h).volume
    v2 = sausage_volume_grid(moved, RHO, h).volume
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
    # one refinement increment: a boundary layer of width h
    assert abs(v1 - v2) <= h * (2 * length + 2 * math.pi * RHO)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scaling(seed):
    path = _random_path(seed, n=6)
    h = RHO / 16
    v1 = sausage_volume_grid(path, RHO, h).volume
    v2 = sausage_volume_grid(2 * path, 2 * RHO, 2 * h).volume
    assert v2 == pytest.approx(4 * v1, rel=1e-9)
    v3 = sausage_volume_grid(2 * path, 2 * RHO, h).volume
    assert v3 == pytest.approx(4 * v1, rel=0.03)
