import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scrlab.dag import ordering_to_mask, parse_ordering
from scrlab.metrics import depth_normals, mad, side, structure_recovery
from scrlab.synth import DEFAULT_EDGES, edges_to_matrix

depths = arrays(np.float64, (5, 5), elements=st.floats(0.1, 10.0))


def plane(G, gx=0.0, gy=0.0, h=1.0, z0=5.0):
    y, x = np.mgrid[0:G, 0:G] * h
    return z0 + gx * x + gy * y


def test_side_identical_is_zero():
    d = np.random.default_rng(0).uniform(0.5, 2, size=(6, 6))
    assert side(d, d) == 0.0


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_side_scale_invariant(k):
    d = np.random.default_rng(1).uniform(0.5, 2, size=(6, 6))
    assert side(d, k * d) == pytest.approx(0.0, abs=1e-12)


def test_side_two_pixel_hand_case():
    gt = np.array([[1.0, 1.0]])
    pred = np.array([[1.0, math.exp(2.0)]])
    assert side(pred, gt) == 1.0


def test_side_batch_is_mean_of_maps():
    rng = np.random.default_rng(2)
    p, g = rng.uniform(0.5, 2, size=(2, 3, 4, 4))
    assert side(p, g) == pytest.approx(np.mean([side(a, b) for a, b in zip(p, g)]), rel=1e-14)


def test_side_rejects_non_positive():
    with pytest.raises(ValueError):
        side(np.zeros((2, 2)), np.ones((2, 2)))


def test_mad_identical_is_zero():
    d = plane(6, 0.3, -0.2)
    assert mad(d, d) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("g", [0.1, 0.5, 1.0, 3.0])
def test_mad_tilted_plane_vs_flat(g):
    assert mad(plane(8, gx=g), plane(8)) == pytest.approx(math.degrees(math.atan(g)), abs=0.1)


def test_mad_planes_tilted_along_different_axes():
    g1, g2 = 0.4, 0.7
    expected = math.degrees(math.acos(1 / math.sqrt((1 + g1 * g1) * (1 + g2 * g2))))
    assert mad(plane(8, gx=g1), plane(8, gy=g2)) == pytest.approx(expected, abs=0.1)


def test_mad_respects_spacing():
    assert mad(plane(8, gx=0.5), plane(8), spacing=0.5) == pytest.approx(math.degrees(math.atan(1.0)), abs=0.1)


def test_mad_rejects_tiny_grid():
    with pytest.raises(ValueError):
        mad(np.ones((2, 2)), np.ones((2, 2)))


@settings(max_examples=100)
@given(depths, depths)
def test_mad_symmetric_and_bounded(a, b):
    m = mad(a, b)
    assert 0.0 <= m <= 180.0
    assert m == pytest.approx(mad(b, a), abs=1e-9)


@settings(max_examples=100)
@given(depths, st.floats(0.01, 100))
def test_side_properties(d, k):
    assert side(d, d) == 0.0
    assert side(k * d, d) == pytest.approx(0.0, abs=1e-9)


def test_depth_normals_unit_length():
    n = depth_normals(np.random.default_rng(0).uniform(1, 2, size=(7, 7)))
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-14)


def test_recovery_perfect():
    gt = edges_to_matrix(DEFAULT_EDGES)
    assert structure_recovery(gt, gt) == {"shd": 0, "precision": 1.0, "recall": 1.0}


def test_recovery_empty_prediction():
    gt = edges_to_matrix(DEFAULT_EDGES)
    r = structure_recovery(np.zeros((4, 4)), gt)
    assert r["shd"] == 3 and r["recall"] == 0.0


def test_recovery_dense_superset():
    gt = edges_to_matrix(DEFAULT_EDGES)
    r = structure_recovery(ordering_to_mask(parse_ordering("DVAL")), gt)
    assert r["recall"] == 1.0
    assert r["precision"] == pytest.approx(3 / 6)
    assert r["shd"] == 3


def test_recovery_reversed_edge_counts_once():
    gt = np.zeros((4, 4))
    gt[0, 1] = 1
    assert structure_recovery(gt.T, gt)["shd"] == 1
