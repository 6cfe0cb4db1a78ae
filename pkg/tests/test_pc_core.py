import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pointgpt_nn import kernels
from pointgpt_nn.errors import DegenerateCloud, EmptySet, InvalidCount, TooFewPoints
from pointgpt_nn.pc_core import (
    PointCloud, build_patches, chamfer, fps, knn, morton_encode, morton_order,
    normalize_unit_sphere, to_unit_cube, uniform_downsample,
)

import oracles

BACKENDS = ["python"] + (["cython"] if kernels.HAVE_COMPILED else [])


def cloud(pts, **kw):
    return PointCloud(np.asarray(pts, dtype=float), **kw)


# -------------------------------------------------------------- downsample

def test_downsample_large_capture():
    pts = np.random.default_rng(0).random((200_000, 3))
    out = uniform_downsample(cloud(pts, label=4, id="raw"), 8192, seed=0)
    assert out.points.shape == (8192, 3)
    assert out.label == 4 and out.id == "raw"
    rows = {tuple(r) for r in pts[:50_000]} | {tuple(r) for r in pts[50_000:]}
    assert all(tuple(r) in rows for r in out.points[:100])


def test_downsample_identity():
    pts = np.random.default_rng(1).random((10, 3))
    out = uniform_downsample(cloud(pts), 10, seed=3)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_downsample_matches_replay_oracle():
    pts = np.stack([np.arange(100.0), np.zeros(100), np.zeros(100)], axis=1)
    out = uniform_downsample(cloud(pts), 50, seed=7)
    expected = oracles.downsample_replay(100, 50, 7)
    assert out.points[:, 0].astype(int).tolist() == expected
    assert len(set(expected)) == 50


def test_downsample_too_few():
    with pytest.raises(TooFewPoints):
        uniform_downsample(cloud(np.zeros((5, 3))), 6, seed=0)


# -------------------------------------------------------------- normalize

def test_normalize_symmetric_pair():
    out = normalize_unit_sphere(cloud([(2, 0, 0), (4, 0, 0)]))
    np.testing.assert_allclose(out.points, [(-1, 0, 0), (1, 0, 0)], atol=1e-12)


def test_normalize_statistics(rng):
    out = normalize_unit_sphere(cloud(rng.normal(size=(50, 3)) * 7 + 3))
    assert np.abs(out.points.mean(axis=0)).max() < 1e-9
    assert abs(np.linalg.norm(out.points, axis=1).max() - 1.0) < 1e-9


def test_normalize_idempotent(rng):
    once = normalize_unit_sphere(cloud(rng.random((64, 3))))
    twice = normalize_unit_sphere(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-9)


def test_normalize_degenerate_flagged():
    with pytest.warns(DegenerateCloud):
        out = normalize_unit_sphere(cloud(np.ones((4, 3))))
    assert not out.points.any()


def test_cloud_rejects_nan():
    with pytest.raises(ValueError):
        cloud([(0, 0, np.nan)])


# -------------------------------------------------------------- fps

@pytest.mark.parametrize("backend", BACKENDS)
def test_fps_three_points(backend):
    pts = np.array([(0, 0, 0), (1, 0, 0), (0.1, 0, 0)], float)
    assert kernels.get_backend(backend).fps(pts, 2, 0).tolist() == [0, 1]


def test_fps_exhaustion(rng):
    c = cloud(rng.random((20, 3)))
    idx = fps(c, 20)
    assert sorted(idx.tolist()) == list(range(20))
    assert idx[0] == 0


@pytest.mark.parametrize("backend", BACKENDS)
def test_fps_matches_bruteforce(backend):
    r = random.Random(5)
    pts = oracles.random_cloud(r, 64)
    got = kernels.get_backend(backend).fps(np.array(pts), 8, 0)
    assert got.tolist() == oracles.fps_bruteforce(pts, 8)


@pytest.mark.parametrize("backend", BACKENDS)
def test_fps_with_duplicates_stays_distinct(backend):
    pts = np.zeros((6, 3))
    pts[3] = (1, 0, 0)
    got = kernels.get_backend(backend).fps(pts, 6, 0)
    assert sorted(got.tolist()) == list(range(6))
    assert got.tolist() == oracles.fps_bruteforce([tuple(p) for p in pts], 6)


def test_fps_invalid_count():
    with pytest.raises(InvalidCount):
        fps(cloud(np.zeros((3, 3))), 4)


# -------------------------------------------------------------- knn

def test_knn_exhaustion(rng):
    pts = rng.random((30, 3))
    q = rng.random(3)
    got = knn(cloud(pts), q, 30)
    assert got.tolist() == oracles.knn_bruteforce(pts.tolist(), q.tolist(), 30)


def test_knn_self_query(rng):
    pts = rng.random((30, 3))
    assert knn(cloud(pts), pts[11], 1).tolist() == [11]


@pytest.mark.parametrize("backend", BACKENDS)
def test_knn_matches_scan(backend):
    r = random.Random(9)
    pts = oracles.random_cloud(r, 128)
    queries = oracles.random_cloud(r, 5)
    got = kernels.get_backend(backend).knn(np.array(pts), np.array(queries), 16)
    for row, q in zip(got, queries):
        assert row.tolist() == oracles.knn_bruteforce(pts, q, 16)


@pytest.mark.parametrize("backend", BACKENDS)
def test_knn_ties_by_index(backend):
    pts = np.array([(1, 0, 0), (0, 1, 0), (0, 0, 1), (-1, 0, 0), (0, 0, 0)], float)
    got = kernels.get_backend(backend).knn(pts, np.zeros((1, 3)), 4)
    assert got[0].tolist() == [4, 0, 1, 2]


def test_knn_invalid():
    with pytest.raises(InvalidCount):
        knn(cloud(np.zeros((3, 3))), np.zeros(3), 4)


# -------------------------------------------------------------- morton

def test_morton_extremes():
    assert morton_encode([0, 0, 0], 5) == 0
    assert morton_encode([1, 1, 1], 2) == 63
    assert morton_encode([1, 1, 1]) == 2 ** 63 - 1


def test_morton_bit_layout():
    assert morton_encode([1, 0, 0], 1) == 0b001
    assert morton_encode([0, 1, 0], 1) == 0b010
    assert morton_encode([0, 0, 1], 1) == 0b100


def test_morton_clamps():
    assert morton_encode([-3, 2, 0.5], 4) == morton_encode([0, 1, 0.5], 4)


def test_morton_sort_matches_bit_string_comparator():
    r = random.Random(2)
    pts = oracles.random_cloud(r, 256)
    codes = morton_encode(np.array(pts), 10)
    got = np.lexsort((np.arange(256), codes)).tolist()
    assert got == oracles.morton_sort_bruteforce(pts, 10)


@given(arrays(np.float64, (40, 3), elements=st.floats(-1, 1)))
@settings(max_examples=50, deadline=None)
def test_morton_order_total_and_idempotent(pts):
    order = morton_order(pts)
    codes = morton_encode(to_unit_cube(pts))
    s = codes[order]
    assert np.all(s[:-1] <= s[1:])
    again = morton_order(pts[order])
    assert again.tolist() == list(range(len(pts)))


# -------------------------------------------------------------- patches

def test_build_patches_shape_full_scale():
    c = normalize_unit_sphere(cloud(np.random.default_rng(3).normal(size=(8192, 3))))
    ps = build_patches(c, 512, 32)
    assert ps.patches.shape == (512, 32, 3) and ps.centers.shape == (512, 3)
    assert ps.n == 512 and ps.k == 32


def test_build_patches_single(rng):
    c = normalize_unit_sphere(cloud(rng.random((40, 3))))
    ps = build_patches(c, 1, 5)
    np.testing.assert_array_equal(ps.centers[0], c.points[0])
    np.testing.assert_array_equal(ps.patches[0, 0], np.zeros(3))


def test_build_patches_composed_oracle():
    r = random.Random(4)
    raw = oracles.random_cloud(r, 64)
    c = normalize_unit_sphere(cloud(raw))
    pts = c.points.tolist()
    centers = oracles.fps_bruteforce(pts, 8)
    cube = [[(v + 1) / 2 for v in pts[i]] for i in centers]
    order = [centers[j] for j in oracles.morton_sort_bruteforce(cube, 21)]
    ps = build_patches(c, 8, 4)
    assert ps.center_indices.tolist() == order
    for i, ci in enumerate(order):
        nbr = oracles.knn_bruteforce(pts, pts[ci], 4)
        np.testing.assert_array_equal(ps.patches[i], c.points[nbr] - c.points[ci])
    assert np.all(ps.patches[:, 0] == 0)


def test_build_patches_deterministic(rng):
    c = normalize_unit_sphere(cloud(rng.random((300, 3))))
    a, b = build_patches(c, 32, 16), build_patches(c, 32, 16)
    assert a.patches.tobytes() == b.patches.tobytes()
    assert a.centers.tobytes() == b.centers.tobytes()


# -------------------------------------------------------------- chamfer

def test_chamfer_identical(rng):
    P = rng.random((10, 3))
    loss = chamfer(P, P)
    assert loss.l1_term == 0 and loss.l2_term == 0 and loss.total == 0


def test_chamfer_hand_value():
    loss = chamfer([(0, 0, 0)], [(1, 0, 0)])
    assert (loss.l1_term, loss.l2_term, loss.total) == (2.0, 2.0, 4.0)


def test_chamfer_matches_exhaustive(rng):
    P, Q = rng.random((20, 3)), rng.random((20, 3))
    l1, l2 = oracles.chamfer_bruteforce(P.tolist(), Q.tolist())
    loss = chamfer(P, Q)
    assert abs(loss.l1_term - l1) < 1e-12 and abs(loss.l2_term - l2) < 1e-12


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_chamfer_symmetric_and_translation_invariant(a, b, seed):
    g = np.random.default_rng(seed)
    P, Q = g.random((a, 3)), g.random((b, 3))
    assert chamfer(P, Q).total == chamfer(Q, P).total
    shift = g.normal(size=3)
    assert abs(chamfer(P + shift, Q + shift).total - chamfer(P, Q).total) < 1e-9


def test_chamfer_empty():
    with pytest.raises(EmptySet):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))
