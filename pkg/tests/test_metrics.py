import itertools

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from geotopo.geometry import GeometricTarget
from geotopo.metrics import (DISPLAY_SCALE, FeatureNormalizer, betti_precision, emd,
                             farthest_point_sample, fmd, frechet_distance, geometric_fidelity,
                             morph_features, one_nna, one_nna_from_distances, one_nna_volumes,
                             tissue_cloud)
from oracles import ball, shell


class _M:
    def __init__(self, mass, centroid, cov_n):
        self.mass, self.centroid, self.cov_n = mass, np.asarray(centroid, float), np.asarray(cov_n)


# fidelity and Betti precision -----------------------------------------------------


def test_fidelity_example():
    t = GeometricTarget(0.1, [0.0, 0.0, 0.0], np.eye(3) / 3)
    m = _M(0.1 + 2e-5, [3e-4, 0.0, 0.0], np.eye(3) / 3 + 9e-5)
    out = geometric_fidelity([m], [t])
    assert np.isclose(out["mass"], 2e-5) and np.isclose(out["centroid"], 1e-4)
    assert np.isclose(out["cov"], 9e-5)
    assert np.isclose(out["mass_display"], 2.0) and np.isclose(out["centroid_display"], 1.0)
    assert np.isclose(out["cov_display"], 9.0)
    assert DISPLAY_SCALE == {"mass": 1e5, "centroid": 1e4, "cov": 1e5}


def test_fidelity_skips_undefined_geometry():
    t = GeometricTarget(0.1, np.zeros(3), np.eye(3) / 3)
    out = geometric_fidelity([_M(0.0, [np.nan] * 3, np.zeros((3, 3))), _M(0.1, np.zeros(3), np.eye(3) / 3)],
                             [t, t])
    assert np.isclose(out["mass"], 0.05) and out["centroid"] == 0 and out["count"] == 2
    with pytest.raises(ValueError):
        geometric_fidelity([], [])
    with pytest.raises(ValueError):
        geometric_fidelity([t], [t, t])


def test_betti_precision():
    solid = ball(12, 4).astype(int)
    hollow = shell(12, 2, 5).astype(int)
    prec = betti_precision([solid, hollow, solid, 2 * solid], (0, 1), (1, 0, 0))
    assert prec == (0.75, 1.0, 0.75)  # the relabelled volume is empty
    onehot = np.stack([1 - solid, solid]).astype(float)
    assert betti_precision([onehot], (0, 1), (1, 0, 0)) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        betti_precision([], (0, 1), (1, 0, 0))


# FMD --------------------------------------------------------------------------------


def test_morph_features_layout():
    L = np.zeros((8, 8, 8), int)
    L[:4] = 1
    f = morph_features(L, 3)
    assert f.shape == (21,)
    assert np.isclose(f[0], 0.5) and np.isclose(f[7], 0.5)
    assert np.allclose(f[8:11], [-0.25, 0, 0]) and np.isclose(f[11:14].sum(), 1)
    assert not f[14:].any()  # absent tissue


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(0)
    for _ in range(10):
        A, B = rng.normal(size=(2, 5, 5))
        c1, c2 = A @ A.T, B @ B.T
        m1, m2 = rng.normal(size=(2, 5))
        ref = np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * scipy.linalg.sqrtm(c1 @ c2).real)
        assert np.isclose(frechet_distance(m1, c1, m2, c2), ref, rtol=1e-8)


def test_frechet_diagonal_closed_form():
    a, b = np.array([1.0, 4.0]), np.array([9.0, 1.0])
    d = frechet_distance([0, 0], np.diag(a), [1, 2], np.diag(b))
    assert np.isclose(d, 5 + np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))


def test_fmd_identical_and_shift():
    X = np.random.default_rng(1).normal(size=(100, 4))
    assert fmd(X, X) < 1e-9
    delta = np.array([0.5, 0.0, -1.0, 0.2])
    norm = FeatureNormalizer(np.zeros(4), np.ones(4))
    assert np.isclose(fmd(X, X + delta, norm), np.sum(delta ** 2))


def test_fmd_gaussian_monte_carlo():
    rng = np.random.default_rng(2)
    d, n = 4, 512
    mu, sd = np.array([2.0, -1.0, 0.0, 1.5]), np.array([1.0, 0.5, 2.0, 1.0])
    expected = np.sum(mu ** 2) + np.sum((1 - sd) ** 2)
    vals = [fmd(rng.normal(size=(n, d)), mu + sd * rng.normal(size=(n, d)),
                FeatureNormalizer(np.zeros(d), np.ones(d))) for _ in range(16)]
    assert abs(np.mean(vals) - expected) < 0.02 * expected


@given(st.integers(0, 2 ** 31))
def test_fmd_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(20, 3)), rng.normal(1, 2, size=(25, 3))
    norm = FeatureNormalizer.fit(X)
    assert fmd(X, Y, norm) >= 0
    assert np.isclose(fmd(X, Y, norm), fmd(Y, X, norm), rtol=1e-7, atol=1e-9)


def test_fmd_needs_two_samples():
    with pytest.raises(ValueError):
        fmd(np.zeros((1, 3)), np.zeros((5, 3)))


# EMD, FPS and 1-NNA -------------------------------------------------------------------


@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_emd_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    a, b = rng.random((k, 3)), rng.random((k, 3))
    best = min(np.mean(np.linalg.norm(a - b[list(p)], axis=1))
               for p in itertools.permutations(range(k)))
    assert np.isclose(emd(a, b), best, rtol=1e-12)


def test_emd_rejects_unequal():
    with pytest.raises(ValueError):
        emd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_fps_examples():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0.1, 0, 0], [0.5, 0, 0]])
    assert np.array_equal(farthest_point_sample(pts, 3), pts[[0, 1, 3]])
    assert len(farthest_point_sample(pts, 10)) == 4
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((0, 3)), 2)


def test_fps_deterministic():
    pts = np.random.default_rng(3).random((200, 3))
    assert np.array_equal(farthest_point_sample(pts, 32, 5), farthest_point_sample(pts, 32, 5))


def test_tissue_cloud():
    L = np.zeros((8, 8, 8), int)
    L[2:4, 2:4, 2:4] = 1
    c = tissue_cloud(L, 1, 100)
    assert c.shape == (8, 3) and np.all(np.abs(c) < 0.5)
    assert tissue_cloud(L, 2) is None


def test_one_nna_disjoint_sets():
    rng = np.random.default_rng(4)
    R = [rng.random((16, 3)) for _ in range(6)]
    S = [rng.random((16, 3)) + 5 for _ in range(6)]
    assert one_nna(R, S) == 1.0


def test_one_nna_from_distances_example():
    D = np.array([[0, 1, 5, 5], [1, 0, 5, 5], [5, 5, 0, 1], [5, 5, 1, 0.0]])
    assert one_nna_from_distances(D, 2) == 1.0
    D = np.array([[0, 5, 1, 5], [5, 0, 5, 1], [1, 5, 0, 5], [5, 1, 5, 0.0]])
    assert one_nna_from_distances(D, 2) == 0.0


def test_one_nna_same_distribution_near_half():
    rng = np.random.default_rng(5)
    clouds = [rng.normal(size=(16, 3)) for _ in range(64)]
    D_all = []
    for _ in range(10):
        perm = rng.permutation(64)
        D_all.append(one_nna([clouds[i] for i in perm[:32]], [clouds[i] for i in perm[32:]]))
    assert 0.35 <= np.mean(D_all) <= 0.65
    assert all(0 <= v <= 1 for v in D_all)


def test_one_nna_volumes_excludes_absent_tissue():
    L = np.zeros((8, 8, 8), int)
    L[:4] = 1
    vols = [np.roll(L, k, axis=1) for k in range(4)]
    with pytest.warns(UserWarning, match="tissue 2"):
        out = one_nna_volumes(vols, vols[::-1], (1, 2), 16)
    assert list(out["per_tissue"]) == [1] and 0 <= out["mean"] <= 1
