import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svitv.geometry import (DISK, GridError, build_polar_disk, build_torus,
                            grid_from_descriptor, inner_product, norm)


def test_disk_small_counts_and_area():
    g = build_polar_disk(1.0, 4, 8)
    assert g.size == 32 and g.kind == DISK
    assert abs(g.weights.sum() - math.pi) <= 1e-10


def test_disk_large_area():
    g = build_polar_disk(2.0, 64, 128)
    assert abs(g.weights.sum() - 4 * math.pi) <= 1e-12 * 4 * math.pi


@pytest.mark.parametrize("args", [(1.0, 0, 8), (0.0, 8, 8), (1.0, 8, 7)])
def test_disk_rejects_bad_sizes(args):
    with pytest.raises(GridError):
        build_polar_disk(*args)


def test_torus_weights():
    g = build_torus(2, (8, 8), (1.0, 1.0))
    assert g.size == 64
    np.testing.assert_array_equal(g.weights, 1 / 64)
    g3 = build_torus(3, (4, 4, 4), (2 * math.pi,) * 3)
    assert abs(g3.weights.sum() - (2 * math.pi) ** 3) <= 1e-12 * g3.measure


@pytest.mark.parametrize("args", [(1, (8,), (1.0,)), (2, (3, 8), (1, 1)),
                                  (2, (8, 8), (1.0, -1.0))])
def test_torus_rejects(args):
    with pytest.raises(GridError):
        build_torus(*args)


@settings(max_examples=25, deadline=None)
@given(R=st.floats(0.1, 10), n_r=st.integers(4, 40),
       n_t=st.integers(4, 40).map(lambda k: 2 * k))
def test_disk_quadrature_exact(R, n_r, n_t):
    g = build_polar_disk(R, n_r, n_t)
    assert abs(g.weights.sum() - g.measure) <= 1e-10 * g.measure


@settings(max_examples=25, deadline=None)
@given(cells=st.lists(st.integers(4, 20), min_size=2, max_size=3),
       L=st.floats(0.1, 10))
def test_torus_quadrature_exact(cells, L):
    g = build_torus(len(cells), cells, [L] * len(cells))
    assert abs(g.weights.sum() - g.measure) <= 1e-10 * g.measure


def test_inner_product_constants(torus32, disk32):
    one = np.ones(torus32.shape)
    assert inner_product(one, one, torus32) == pytest.approx(1.0, abs=1e-14)
    one = np.ones(disk32.shape)
    assert abs(inner_product(one, one, disk32) - math.pi) <= 1e-10


def test_norm_positive(disk32, rng):
    u = rng.standard_normal(disk32.shape)
    assert norm(u, disk32) > 0
    assert norm(np.zeros(disk32.shape), disk32) == 0


def test_disk_normals_unit_on_rim(disk32):
    n = disk32.normals[:, -1]
    np.testing.assert_allclose(np.hypot(*n), 1.0, atol=1e-15)
    assert not disk32.normals[:, :-1].any()


@pytest.mark.parametrize("make", [lambda: build_polar_disk(1.5, 8, 16),
                                  lambda: build_torus(3, (4, 5, 6), (1, 2, 3))])
def test_descriptor_round_trip(make):
    g = make()
    h = grid_from_descriptor(g.descriptor())
    assert h.shape == g.shape
    np.testing.assert_array_equal(h.weights, g.weights)
    np.testing.assert_array_equal(h.coords, g.coords)
