import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefield.field import (
    EPS_HIT,
    FeatureField,
    SingularityError,
    query_batch,
    query_feature,
    query_gradient,
    read_query_list,
    write_feature_rows,
)
from sparsefield.geometry import RigidTransform


def brute_idw(pts, feats, q):
    d2 = ((pts - q) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    if d2[i] <= EPS_HIT**2:
        return feats[i]
    w = 1.0 / d2
    return (w[:, None] * feats).sum(axis=0) / w.sum()


def fd_gradient(field, q, h=1e-6):
    g = np.zeros((field.n_channels, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (field.query(q + e) - field.query(q - e)) / (2 * h)
    return g


def test_examples(backend):
    f = FeatureField([[0.0, 0, 0], [1.0, 0, 0]], [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(query_feature(f, [0.0, 0, 0]), [1.0, 0.0])
    np.testing.assert_allclose(query_feature(f, [0.5, 0.3, 0]), [0.5, 0.5], rtol=1e-15)
    f = FeatureField([[0.0, 0, 0], [3.0, 0, 0]], [[1.0], [0.0]])
    np.testing.assert_allclose(f.weights([1.0, 0, 0]), [0.8, 0.2], rtol=1e-15)
    np.testing.assert_allclose(query_feature(f, [1.0, 0, 0]), [0.8], rtol=1e-15)


def test_hit_returns_nearest_feature(backend):
    pts = np.array([[0.0, 0, 0], [1e-7, 0, 0], [1.0, 1, 1]])
    f = FeatureField(pts, [[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(f.query([1.0e-7, 0, 0]), [2.0])
    np.testing.assert_array_equal(f.query([1.0, 1, 1 + 5e-7]), [3.0])
    with pytest.raises(SingularityError):
        query_gradient(f, [1.0, 1.0, 1.0])
    _, g, hit = f.query_with_gradient([[1.0, 1.0, 1.0], [0.5, 0.5, 0.5]])
    assert hit[0] == 2 and hit[1] == -1
    np.testing.assert_array_equal(g[0], 0.0)


def test_matches_brute_force_and_batch(backend, rng):
    pts = rng.normal(size=(60, 3))
    feats = rng.normal(size=(60, 4))
    f = FeatureField(pts, feats)
    qs = rng.normal(size=(100, 3))
    batch = query_batch(f, qs)
    for i, q in enumerate(qs):
        np.testing.assert_allclose(batch[i], brute_idw(pts, feats, q), rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(batch[i], query_feature(f, q))
    np.testing.assert_array_equal(query_batch(f, qs[:1])[0], query_feature(f, qs[0]))
    dup = query_batch(f, np.vstack([qs[:3], qs[:3]]))
    np.testing.assert_array_equal(dup[:3], dup[3:])


def test_backends_agree(rng):
    from sparsefield._accel import HAVE_NUMBA, set_backend

    if not HAVE_NUMBA:
        pytest.skip("numba unavailable")
    pts = rng.normal(size=(500, 3))
    feats = rng.normal(size=(500, 8))
    qs = rng.normal(size=(300, 3))
    qs[0] = pts[7]
    out = {}
    for b in ("numba", "numpy"):
        prev = set_backend(b)
        try:
            out[b] = FeatureField(pts, feats).query_with_gradient(qs)
        finally:
            set_backend(prev)
    for a, c in zip(out["numba"], out["numpy"]):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-13)


def test_single_point_gradient_zero(backend):
    f = FeatureField([[0.2, 0.1, 0.0]], [[3.0, -1.0]])
    np.testing.assert_array_equal(f.query([5.0, 5, 5]), [3.0, -1.0])
    np.testing.assert_array_equal(query_gradient(f, [1.0, 2.0, 3.0]), np.zeros((2, 3)))


def test_two_point_midpoint_gradient(backend):
    d = 0.8
    f1, f2 = 2.0, -1.0
    f = FeatureField([[0.0, 0, 0], [d, 0, 0]], [[f1], [f2]])
    q = np.array([d / 2, 0.0, 0.0])
    g = query_gradient(f, q)
    # closed form at the midpoint: df/dx = (f2 - f1) * 2 / d, zero off-axis
    np.testing.assert_allclose(g[0], [(f2 - f1) * 2 / d, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(g, fd_gradient(f, q), rtol=1e-6, atol=1e-9)


def test_gradient_matches_finite_differences(backend, rng):
    pts = rng.normal(size=(50, 3))
    f = FeatureField(pts, rng.normal(size=(50, 3)))
    for q in rng.normal(size=(20, 3)):
        a = query_gradient(f, q)
        n = fd_gradient(f, q)
        assert np.max(np.abs(a - n) / np.maximum(np.abs(n), 1e-3)) <= 1e-6


def test_knn_with_k_equal_n_is_exact(backend, rng):
    pts = rng.normal(size=(80, 3))
    feats = rng.normal(size=(80, 5))
    qs = rng.normal(size=(40, 3))
    exact = FeatureField(pts, feats).query_with_gradient(qs)
    knn = FeatureField(pts, feats, mode="knn", k=80).query_with_gradient(qs)
    for a, b in zip(exact, knn):
        np.testing.assert_array_equal(a, b)


def test_knn_truncation_is_an_approximation(backend, rng):
    pts = rng.normal(size=(400, 3))
    feats = rng.normal(size=(400, 2))
    qs = rng.normal(size=(50, 3))
    dev = np.abs(FeatureField(pts, feats, mode="knn", k=64).query_batch(qs) - FeatureField(pts, feats).query_batch(qs))
    print(f"knn k=64 vs exact, max abs deviation: {dev.max():.3e}")
    assert np.isfinite(dev).all()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_weights_and_convexity(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    feats = rng.normal(size=(n, 3))
    f = FeatureField(pts, feats)
    q = rng.uniform(-2, 2, size=3)
    w = f.weights(q)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-12
    v = f.query(q)
    assert np.all(v >= feats.min(axis=0) - 1e-12) and np.all(v <= feats.max(axis=0) + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(30, 3))
    feats = rng.normal(size=(30, 2))
    T = RigidTransform.from_rotvec(rng.normal(size=3), rng.uniform(-2, 2, size=3))
    qs = rng.uniform(-1, 1, size=(10, 3))
    a = FeatureField(pts, feats).query_batch(qs)
    b = FeatureField(T.apply(pts), feats).query_batch(T.apply(qs))
    assert np.abs(a - b).max() <= 1e-9


def test_validation():
    with pytest.raises(ValueError):
        FeatureField(np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        FeatureField(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        FeatureField(np.zeros((2, 3)), np.zeros((2, 2)), mode="octree")
    f = FeatureField(np.zeros((1, 3)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        f.query([np.nan, 0, 0])
    assert not f.points.flags.writeable


def test_query_list_and_rows(tmp_path):
    (tmp_path / "q.txt").write_text("# header\n0 0 0\n\n1.5 2 -3  # trailing\n")
    q = read_query_list(tmp_path / "q.txt")
    np.testing.assert_array_equal(q, [[0, 0, 0], [1.5, 2, -3]])
    (tmp_path / "bad.txt").write_text("1 2\n")
    with pytest.raises(ValueError):
        read_query_list(tmp_path / "bad.txt")
    vals = np.array([[0.1, 2.0], [3.0, -4.5]])
    write_feature_rows(tmp_path / "o.txt", vals)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "o.txt"), vals)
    write_feature_rows(tmp_path / "o.bin", vals, binary=True)
    np.testing.assert_array_equal(np.fromfile(tmp_path / "o.bin", "<f4").reshape(2, 2), vals.astype(np.float32))
