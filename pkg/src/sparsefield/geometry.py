"""Point clouds, pinhole cameras, rigid transforms, spatial indexing, plane removal."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


class RigidTransform:
    """Rotation + translation acting as ``x -> R @ x + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, check=True):
        R = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64).reshape(3)
        if check:
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise ValueError("rotation is not a proper orthonormal matrix")
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m, check=True):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3], check=check)

    @classmethod
    def from_rotvec(cls, rotvec, translation=None):
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(),
                   translation, check=False)

    @classmethod
    def from_yaw(cls, yaw, translation=None):
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation, check=False)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotvec(self):
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation, check=False)

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, check=False)

    def __repr__(self):
        return f"RigidTransform(rotvec={self.rotvec().round(6).tolist()}, t={self.translation.round(6).tolist()})"


class PointCloud:
    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def backproject_depth(depth, intr, pose=None):
    """Lift valid depth pixels to world points.

    Pixels with depth <= 0 or NaN are skipped.  Returns ``(cloud,
    pixel_index)`` with ``pixel_index[i] = (u, v)``, in row-major pixel order.
    """
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise DimensionError(f"depth grid {depth.shape} does not match intrinsics "
                             f"{(intr.height, intr.width)}")
    d = depth.astype(np.float64)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(d) & (d > 0)
    v, u = np.nonzero(valid)
    z = d[v, u]
    cam = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1)
    if pose is not None:
        cam = pose.apply(cam)
    pixel_index = np.stack([u, v], axis=1).astype(np.int64)
    return PointCloud(cam), pixel_index


def project_points(points, intr, pose=None):
    """World points to (u, v, depth) for a camera with camera-to-world ``pose``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pose is not None:
        p = pose.inverse().apply(p)
    z = p[:, 2]
    u = p[:, 0] * intr.fx / z + intr.cx
    v = p[:, 1] * intr.fy / z + intr.cy
    return u, v, z


def transform_cloud(cloud, t):
    return PointCloud(t.apply(cloud.points))


class SpatialIndex:
    """Immutable kd-tree over a point cloud.

    Radius membership is strict (``|x - c| < r``) and decided on squared
    distances, so results match a brute-force scan exactly.
    """

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return self.points.shape[0]

    def _filter(self, center, cand, r, exclude):
        cand = np.asarray(cand, dtype=np.int64)
        diff = self.points[cand] - center
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        keep = d2 < r * r
        if exclude is not None:
            keep &= cand != exclude
        return np.sort(cand[keep])

    def radius_query(self, center, r, exclude=None):
        """Ids strictly within ``r`` of ``center``, ascending."""
        if r <= 0:
            raise ValueError("radius must be positive")
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = self._tree.query_ball_point(center, r * (1.0 + 1e-9) + 1e-15)
        return self._filter(center, cand, r, exclude)

    def radius_query_id(self, i, r):
        """Neighbours of indexed point ``i`` within ``r``, excluding ``i`` itself."""
        return self.radius_query(self.points[i], r, exclude=i)

    def radius_neighbors_all(self, r):
        """CSR neighbourhoods (self excluded) of every indexed point."""
        if r <= 0:
            raise ValueError("radius must be positive")
        n = len(self)
        pairs = self._tree.query_pairs(r * (1.0 + 1e-9) + 1e-15, output_type="ndarray")
        if pairs.size:
            diff = self.points[pairs[:, 0]] - self.points[pairs[:, 1]]
            d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
            pairs = pairs[d2 < r * r]
        both = np.concatenate([pairs, pairs[:, ::-1]]) if pairs.size else np.zeros((0, 2), np.int64)
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=n)
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return ptr, both[:, 1].astype(np.int64)

    def knn(self, queries, k):
        """``k`` nearest ids per query (nearest first, ties by lower id) and distances."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), len(self))
        d, i = self._tree.query(q, k=k)
        d = np.asarray(d).reshape(len(q), k)
        i = np.asarray(i, dtype=np.int64).reshape(len(q), k)
        order = np.lexsort((i, d), axis=-1)
        return np.take_along_axis(i, order, 1), np.take_along_axis(d, order, 1)

    def nearest(self, queries):
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=1)
        return np.asarray(i, dtype=np.int64), np.asarray(d)


def radius_query(index, center, r, exclude=None):
    return index.radius_query(center, r, exclude)


def _plane_from_points(p):
    n = np.cross(p[1] - p[0], p[2] - p[0])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n, -float(n @ p[0])


def ransac_remove_plane(cloud, dist_thresh, iters=500, seed=0):
    """Fit the dominant plane by seeded RANSAC and remove its inliers.

    Returns ``(inlier_ids, outlier_cloud, (normal, offset))``.  Collinear
    samples are redrawn and do not count against ``iters``.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n < 3:
        raise ValueError("RANSAC needs at least three points")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_mask = None
    best_plane = None
    done = 0
    redraws = 0
    while done < iters:
        sample = pts[rng.choice(n, 3, replace=False)]
        plane = _plane_from_points(sample)
        if plane is None:
            redraws += 1
            if redraws > 100 * iters:
                raise ValueError("all RANSAC samples are degenerate (collinear cloud)")
            continue
        done += 1
        normal, offset = plane
        mask = np.abs(pts @ normal + offset) <= dist_thresh
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_plane = count, mask, plane
    inliers = np.nonzero(best_mask)[0]
    return inliers, PointCloud(pts[~best_mask]), best_plane
