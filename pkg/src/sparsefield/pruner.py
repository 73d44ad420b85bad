"""Neighbourhood feature voting and removal of the least-supported points."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import SpatialIndex


@dataclass
class PruneConfig:
    radius: float = 0.02
    delta: float = 0.5  # absolute threshold, or multiple of the median pair distance
    delta_mode: str = "relative"  # "relative" | "absolute"
    fraction: float = 0.2
    median_pairs: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0 or self.delta <= 0:
            raise ValueError("radius and delta must be positive")
        if not 0 <= self.fraction < 1:
            raise ValueError("fraction must lie in [0, 1)")
        if self.delta_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")


@dataclass
class VoteResult:
    votes: np.ndarray
    mean_dist: np.ndarray  # mean feature distance to in-radius neighbours (inf if none)
    delta: float


def median_neighbour_distance(feats, ptr, ids, n_pairs, seed):
    """Median feature distance over seeded random in-radius pairs."""
    counts = np.diff(ptr)
    owners = np.nonzero(counts)[0]
    if owners.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    i = owners[rng.integers(owners.size, size=n_pairs)]
    j = ids[ptr[i] + (rng.random(n_pairs) * counts[i]).astype(np.int64)]
    return float(np.median(np.linalg.norm(feats[i] - feats[j], axis=1)))


def resolve_delta(feats, ptr, ids, cfg):
    if cfg.delta_mode == "absolute":
        return cfg.delta
    med = median_neighbour_distance(feats, ptr, ids, cfg.median_pairs, cfg.seed)
    return cfg.delta * med if med > 0 else cfg.delta


def count_votes(cloud, index=None, cfg=None):
    """Votes per point: in-radius neighbours (self excluded) with feature distance < delta."""
    cfg = PruneConfig() if cfg is None else cfg
    feats = cloud.features.astype(np.float64)
    index = SpatialIndex(cloud.points.astype(np.float64)) if index is None else index
    ptr, ids = index.radius_neighbors_all(cfg.radius)
    delta = resolve_delta(feats, ptr, ids, cfg)
    votes, mean_dist = kernels.neighbour_votes(feats, ptr, ids, delta)
    return VoteResult(votes, mean_dist, delta)


def removal_order(votes, mean_dist):
    """Point ids, first-to-remove first.

    Fewest votes first; ties go to the larger mean neighbour feature distance,
    then to the larger id.
    """
    n = len(votes)
    ids = np.arange(n)
    return np.lexsort((-ids, -np.asarray(mean_dist, dtype=np.float64), np.asarray(votes)))


def prune_cloud(cloud, votes, cfg=None):
    """Drop ``floor(fraction * N)`` points by :func:`removal_order`; survivors keep their order.

    ``votes`` is a :class:`VoteResult` (or a plain vote array, in which case
    ties fall through to the id rule).
    """
    cfg = PruneConfig() if cfg is None else cfg
    if isinstance(votes, VoteResult):
        v, md = votes.votes, votes.mean_dist
    else:
        v = np.asarray(votes)
        md = np.zeros(len(v))
    if len(v) != len(cloud):
        raise ValueError("votes are not aligned with the cloud")
    n_drop = int(np.floor(cfg.fraction * len(cloud)))
    drop = removal_order(v, md)[:n_drop]
    keep = np.ones(len(cloud), dtype=bool)
    keep[drop] = False
    return cloud.subset(np.nonzero(keep)[0]), np.sort(drop)


def write_vote_report(path, cloud, result, removed):
    removed_mask = np.zeros(len(cloud), dtype=bool)
    removed_mask[removed] = True
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# delta {result.delta!r}\n# id x y z votes mean_feature_dist removed\n")
        for i in range(len(cloud)):
            x, y, z = (float(c) for c in cloud.points[i])
            fh.write(f"{i} {x!r} {y!r} {z!r} {int(result.votes[i])} {float(result.mean_dist[i])!r} "
                     f"{int(removed_mask[i])}\n")
