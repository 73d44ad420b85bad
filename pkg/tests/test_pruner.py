import numpy as np
import pytest

from sparsefield.geometry import SpatialIndex
from sparsefield.pruner import (
    PruneConfig,
    count_votes,
    median_neighbour_distance,
    prune_cloud,
    removal_order,
    resolve_delta,
    write_vote_report,
)
from sparsefield.scan_io import FeaturedCloud


def brute_votes(pts, feats, r, delta):
    """All-pairs count, no index involved."""
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    fd = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=-1)
    ok = (d2 < r * r) & (fd < delta)
    np.fill_diagonal(ok, False)
    return ok.sum(axis=1)


def absolute(delta, r=0.02, fraction=0.2):
    return PruneConfig(radius=r, delta=delta, delta_mode="absolute", fraction=fraction)


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(radius=0)
    with pytest.raises(ValueError):
        PruneConfig(fraction=1.0)
    with pytest.raises(ValueError):
        PruneConfig(delta_mode="median")


def test_isolated_and_clique(backend):
    iso = FeaturedCloud([[0, 0, 0], [1, 0, 0], [0, 1, 0]], np.zeros((3, 2)))
    res = count_votes(iso, cfg=absolute(0.5))
    np.testing.assert_array_equal(res.votes, 0)
    assert np.all(np.isinf(res.mean_dist))
    clique = FeaturedCloud(np.random.default_rng(0).uniform(0, 0.005, size=(7, 3)), np.ones((7, 3)))
    np.testing.assert_array_equal(count_votes(clique, cfg=absolute(0.5)).votes, 6)


def test_votes_match_brute_force(backend):
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 0.03, size=(6, 3))
    feats = rng.normal(size=(6, 3))
    np.testing.assert_array_equal(count_votes(FeaturedCloud(pts, feats), cfg=absolute(1.5)).votes,
                                  brute_votes(pts.astype(np.float32).astype(float), feats.astype(np.float32), 0.02, 1.5))
    for _ in range(20):
        n = int(rng.integers(2, 500))
        pts = rng.uniform(0, 0.1, size=(n, 3)).astype(np.float32)
        feats = rng.normal(size=(n, 4)).astype(np.float32)
        delta = float(rng.uniform(0.5, 3.0))
        got = count_votes(FeaturedCloud(pts, feats), cfg=absolute(delta)).votes
        np.testing.assert_array_equal(got, brute_votes(pts.astype(float), feats.astype(float), 0.02, delta))


def test_backends_agree_on_votes(rng):
    from sparsefield import kernels
    from sparsefield._accel import HAVE_NUMBA, set_backend

    if not HAVE_NUMBA:
        pytest.skip("numba unavailable")
    pts = rng.uniform(0, 0.1, size=(800, 3))
    feats = rng.normal(size=(800, 5))
    ptr, ids = SpatialIndex(pts).radius_neighbors_all(0.02)
    out = []
    for b in ("numba", "numpy"):
        prev = set_backend(b)
        out.append(kernels.neighbour_votes(feats, ptr, ids, 2.0))
        set_backend(prev)
    np.testing.assert_array_equal(out[0][0], out[1][0])
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-12)


def test_self_exclusion_duplicate():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 0.05, size=(40, 3))
    feats = rng.normal(size=(40, 2))
    cfg = absolute(1.0)
    base = count_votes(FeaturedCloud(pts, feats), cfg=cfg).votes
    dup = count_votes(FeaturedCloud(np.vstack([pts, pts[5]]), np.vstack([feats, feats[5]])), cfg=cfg).votes
    assert dup[5] == base[5] + 1


def test_relative_delta_is_half_median():
    rng = np.random.default_rng(3)
    cloud = FeaturedCloud(rng.uniform(0, 0.05, size=(200, 3)), rng.normal(size=(200, 3)))
    ptr, ids = SpatialIndex(cloud.points.astype(float)).radius_neighbors_all(0.02)
    med = median_neighbour_distance(cloud.features.astype(float), ptr, ids, 10_000, 0)
    cfg = PruneConfig()
    assert resolve_delta(cloud.features.astype(float), ptr, ids, cfg) == pytest.approx(0.5 * med, rel=0, abs=0)
    assert count_votes(cloud, cfg=cfg).delta == 0.5 * med


def test_prune_count_and_order():
    cloud = FeaturedCloud(np.arange(30).reshape(10, 3), np.zeros((10, 1)))
    kept, removed = prune_cloud(cloud, np.zeros(10, dtype=int), PruneConfig())
    assert len(kept) == 8
    np.testing.assert_array_equal(removed, [8, 9])  # ties fall to the larger ids
    np.testing.assert_array_equal(kept.points, cloud.points[:8])


def test_tie_break_mean_distance():
    votes = np.array([1, 1, 1, 0, 2])
    md = np.array([0.3, 0.9, 0.9, 0.1, np.inf])
    np.testing.assert_array_equal(removal_order(votes, md), [3, 2, 1, 0, 4])


def test_random_fixtures_cardinality_and_boundary():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(1, 300))
        frac = float(rng.uniform(0, 0.9))
        cloud = FeaturedCloud(rng.uniform(0, 0.06, size=(n, 3)), rng.normal(size=(n, 3)))
        cfg = PruneConfig(fraction=frac, seed=int(rng.integers(1000)))
        res = count_votes(cloud, cfg=cfg)
        kept, removed = prune_cloud(cloud, res, cfg)
        assert len(removed) == int(np.floor(frac * n)) and len(kept) == n - len(removed)
        if len(removed) and len(kept):
            mask = np.zeros(n, bool)
            mask[removed] = True
            assert res.votes[mask].max() <= res.votes[~mask].min()


def test_injected_outliers_removed():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 0.01, size=(20, 3))
    feats = np.tile([1.0, 0.0, 0.0], (20, 1)) + rng.normal(0, 0.01, size=(20, 3))
    out = [3, 11, 17]
    feats[out] = rng.normal(0, 1, size=(3, 3)) + [0, 5, 5]
    cloud = FeaturedCloud(pts, feats)
    cfg = absolute(0.2)
    res = count_votes(cloud, cfg=cfg)
    # constructed so every outlier has strictly fewer votes than every coherent point
    inl = np.setdiff1d(np.arange(20), out)
    assert res.votes[out].max() < res.votes[inl].min()
    _, removed = prune_cloud(cloud, res, cfg)
    assert len(removed) == 4 and set(out) <= set(removed)


def test_determinism_and_report(tmp_path):
    rng = np.random.default_rng(6)
    cloud = FeaturedCloud(rng.uniform(0, 0.05, size=(100, 3)), rng.normal(size=(100, 4)))
    a = prune_cloud(cloud, count_votes(cloud))[1]
    res = count_votes(cloud)
    b = prune_cloud(cloud, res)[1]
    np.testing.assert_array_equal(a, b)
    write_vote_report(tmp_path / "v.txt", cloud, res, b)
    rows = np.loadtxt(tmp_path / "v.txt")
    assert rows.shape == (100, 7)
    np.testing.assert_array_equal(rows[:, 4], res.votes)
    assert rows[:, 6].sum() == 20
