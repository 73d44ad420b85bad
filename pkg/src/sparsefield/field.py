"""Continuous feature field by inverse-squared-distance weighting of point features."""

import numpy as np

from . import kernels
from .geometry import SpatialIndex

EPS_HIT = 1e-6
DEFAULT_K = 64


class SingularityError(ValueError):
    """Gradient requested at a query that coincides with a data point."""


class FeatureField:
    """Immutable field ``f(q) = sum_i w_i f_i`` with ``w_i ∝ 1/|q - x_i|^2``.

    ``mode="exact"`` sums over every point in ascending id order.
    ``mode="knn"`` sums over the ``k`` nearest points only (still in ascending
    id order); it is an approximation and equals exact mode when ``k = N``.
    """

    def __init__(self, points, features, mode="exact", k=DEFAULT_K, eps_hit=EPS_HIT):
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        feats = np.array(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if pts.shape[0] == 0:
            raise ValueError("feature field needs at least one point")
        if feats.shape[0] != pts.shape[0]:
            raise ValueError("points and features have different row counts")
        if mode not in ("exact", "knn"):
            raise ValueError(f"unknown field mode {mode!r}")
        pts.setflags(write=False)
        feats.setflags(write=False)
        self.points = pts
        self.features = feats
        self.mode = mode
        self.k = min(int(k), pts.shape[0])
        self.eps_hit = float(eps_hit)
        self.index = SpatialIndex(pts)

    @classmethod
    def from_cloud(cls, cloud, **kwargs):
        return cls(cloud.points, cloud.features, **kwargs)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]

    def _neighbours(self, queries):
        if self.mode == "exact":
            return None
        ids, _ = self.index.knn(queries, self.k)
        return np.sort(ids, axis=1)

    def _eval(self, queries, want_grad):
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(q)):
            raise ValueError("query points must be finite")
        return kernels.idw(self.points, self.features, q, self.eps_hit, self._neighbours(q), want_grad)

    def query(self, q):
        """Feature at a single 3-vector."""
        return self._eval(q, False)[0][0]

    def query_batch(self, queries):
        return self._eval(queries, False)[0]

    def query_with_gradient(self, queries):
        """Values (M x C), gradients (M x C x 3) and hit ids (-1 when regular).

        Rows that hit a data point carry a zero gradient instead of raising.
        """
        return self._eval(queries, True)

    def gradient(self, q):
        """``d f / d q`` as a C x 3 matrix."""
        _, grad, hit = self._eval(q, True)
        if hit[0] >= 0:
            raise SingularityError(f"query lies within {self.eps_hit} m of point {hit[0]}")
        return grad[0]

    def weights(self, q):
        """Normalised interpolation weights for one query (length N, zeros outside knn set)."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        diff = q - self.points
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        w = np.zeros(len(self))
        i_min = int(np.argmin(d2))
        if d2[i_min] <= self.eps_hit**2:
            w[i_min] = 1.0
            return w
        ids = np.arange(len(self)) if self.mode == "exact" else self._neighbours(q)[0]
        inv = 1.0 / d2[ids]
        w[ids] = inv / inv.sum()
        return w


def query_feature(field, q):
    return field.query(q)


def query_batch(field, queries):
    return field.query_batch(queries)


def query_gradient(field, q):
    return field.gradient(q)


def read_query_list(path):
    """Text file, one ``x y z`` per line; blank lines and ``#`` comments ignored."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            rows.append([float(p) for p in parts])
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_feature_rows(path, values, binary=False):
    values = np.asarray(values, dtype=np.float64)
    if binary:
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
