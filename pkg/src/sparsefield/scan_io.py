"""Scan bundles and featured clouds: on-disk formats, feature lifting, view merging.

Scan bundle directory::

    meta.json     format_version, magic, width, height, feature_dims [Hf, Wf, C],
                  intrinsics, camera_to_world (16 floats, row-major), payloads
    depth.bin     H*W float32 LE, row-major, meters (<= 0 or NaN = invalid)
    features.bin  Hf*Wf*C float32 LE, row-major, channel-last
    rgb.ppm       optional binary PPM (P6)

Featured cloud directory::

    meta.json        format_version, magic, N, C, K, payloads, optional pca
    points.bin       N*3 float32 LE
    feats.bin        N*C float32 LE
    view_ids.bin     N uint16 LE
    pixel_index.bin  optional N*2 uint32 LE (u, v)
    pca.bin          optional C_in + C_in * C float64 LE (mean, then the C_in x C basis)
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform, backproject_depth

FORMAT_VERSION = 1
BUNDLE_MAGIC = "sparsefield/scan-bundle"
CLOUD_MAGIC = "sparsefield/featured-cloud"
DEPTH_NOTE = "float32 LE meters, row-major; values <= 0 or NaN are invalid"

_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")
_U16 = np.dtype("<u2")
_U32 = np.dtype("<u4")


class FormatError(ValueError):
    pass


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _read_blob(path, dtype, count):
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"missing payload {path}") from None
    expected = count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{os.path.basename(path)}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).copy()


def _write_blob(path, arr, dtype):
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _check_version(meta, magic, path):
    if meta.get("magic") != magic:
        raise FormatError(f"{path}: bad magic {meta.get('magic')!r}, expected {magic!r}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {meta.get('format_version')!r}")


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    data = open(path, "rb").read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raster = data[pos:]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# scan bundles
# ---------------------------------------------------------------------------


@dataclass
class ScanBundle:
    depth: np.ndarray  # (H, W) float32 meters
    intrinsics: CameraIntrinsics
    pose: RigidTransform  # camera -> world
    features: np.ndarray  # (Hf, Wf, C) float32
    rgb: np.ndarray = None  # (H, W, 3) uint8

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise FormatError("depth grid does not match intrinsics")
        if self.features.ndim != 3 or self.features.shape[2] < 1:
            raise FormatError("feature map must be Hf x Wf x C with C >= 1")
        if not np.all(np.isfinite(self.features)):
            raise FormatError("feature map contains non-finite entries")
        if self.rgb is not None:
            self.rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
            if self.rgb.shape != self.depth.shape + (3,):
                raise FormatError("rgb image does not match the depth grid")

    @property
    def feature_scale(self):
        """(sx, sy): depth pixel -> feature cell scale factors."""
        hf, wf, _ = self.features.shape
        return wf / self.intrinsics.width, hf / self.intrinsics.height


def save_scan_bundle(bundle, path):
    os.makedirs(path, exist_ok=True)
    intr = bundle.intrinsics
    hf, wf, c = bundle.features.shape
    payloads = {"depth": "depth.bin", "features": "features.bin"}
    if bundle.rgb is not None:
        payloads["rgb"] = "rgb.ppm"
    meta = {
        "magic": BUNDLE_MAGIC,
        "format_version": FORMAT_VERSION,
        "width": intr.width,
        "height": intr.height,
        "feature_dims": [hf, wf, c],
        "intrinsics": {"fx": float(intr.fx), "fy": float(intr.fy), "cx": float(intr.cx), "cy": float(intr.cy)},
        "camera_to_world": [float(v) for v in bundle.pose.matrix().reshape(-1)],
        "depth_encoding": DEPTH_NOTE,
        "payloads": payloads,
    }
    _write_json(os.path.join(path, "meta.json"), meta)
    _write_blob(os.path.join(path, "depth.bin"), bundle.depth, _F32)
    _write_blob(os.path.join(path, "features.bin"), bundle.features, _F32)
    if bundle.rgb is not None:
        write_ppm(os.path.join(path, "rgb.ppm"), bundle.rgb)


def load_scan_bundle(path):
    meta = _read_json(os.path.join(path, "meta.json"))
    _check_version(meta, BUNDLE_MAGIC, path)
    try:
        w, h = int(meta["width"]), int(meta["height"])
        hf, wf, c = (int(v) for v in meta["feature_dims"])
        k = meta["intrinsics"]
        intr = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]), w, h)
        pose = RigidTransform.from_matrix(np.array(meta["camera_to_world"], dtype=np.float64))
        payloads = meta["payloads"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed meta.json ({exc})") from None
    depth = _read_blob(os.path.join(path, payloads["depth"]), _F32, h * w).reshape(h, w)
    feats = _read_blob(os.path.join(path, payloads["features"]), _F32, hf * wf * c).reshape(hf, wf, c)
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: non-finite feature entries")
    if np.any(np.isinf(depth)):
        raise FormatError(f"{path}: infinite depth entries")
    rgb = None
    if payloads.get("rgb"):
        rgb = read_ppm(os.path.join(path, payloads["rgb"]))
    return ScanBundle(depth, intr, pose, feats, rgb)


# ---------------------------------------------------------------------------
# featured clouds
# ---------------------------------------------------------------------------


@dataclass
class PCABasis:
    mean: np.ndarray  # (C_in,)
    basis: np.ndarray  # (C_in, C_out)

    def apply(self, feats):
        return (np.asarray(feats, dtype=np.float64) - self.mean) @ self.basis


def fit_pca(feats, dim):
    """Principal axes of ``feats`` (sign-fixed so each axis' largest entry is positive)."""
    f = np.asarray(feats, dtype=np.float64)
    mean = f.mean(axis=0)
    _, _, vt = np.linalg.svd(f - mean, full_matrices=False)
    basis = vt[:dim].T.copy()
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])])
    basis *= np.where(flip == 0, 1.0, flip)
    return PCABasis(mean, basis)


@dataclass
class FeaturedCloud:
    points: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, C)
    view_ids: np.ndarray = None  # (N,) uint16
    pixel_index: np.ndarray = None  # (N, 2) (u, v)
    pca: PCABasis = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        n = self.points.shape[0]
        if self.features.shape[0] != n:
            raise FormatError("points and features have different row counts")
        if self.view_ids is None:
            self.view_ids = np.zeros(n, dtype=np.uint16)
        self.view_ids = np.ascontiguousarray(self.view_ids, dtype=np.uint16).reshape(n)
        if self.pixel_index is not None:
            self.pixel_index = np.ascontiguousarray(self.pixel_index, dtype=np.int64).reshape(n, 2)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]

    @property
    def n_views(self):
        return int(self.view_ids.max()) + 1 if len(self) else 0

    def view(self, k):
        m = self.view_ids == k
        pix = None if self.pixel_index is None else self.pixel_index[m]
        return FeaturedCloud(self.points[m], self.features[m], self.view_ids[m], pix, self.pca)

    def subset(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        pix = None if self.pixel_index is None else self.pixel_index[ids]
        return FeaturedCloud(self.points[ids], self.features[ids], self.view_ids[ids], pix, self.pca)

    def with_features(self, feats):
        return FeaturedCloud(self.points, feats, self.view_ids, self.pixel_index, self.pca)


def save_featured_cloud(cloud, path):
    os.makedirs(path, exist_ok=True)
    payloads = {"points": "points.bin", "features": "feats.bin", "view_ids": "view_ids.bin"}
    if cloud.pixel_index is not None:
        payloads["pixel_index"] = "pixel_index.bin"
    meta = {
        "magic": CLOUD_MAGIC,
        "format_version": FORMAT_VERSION,
        "N": len(cloud),
        "C": cloud.n_channels,
        "K": cloud.n_views,
        "payloads": payloads,
    }
    if cloud.pca is not None:
        payloads["pca"] = "pca.bin"
        meta["pca"] = {"input_dim": int(cloud.pca.basis.shape[0]), "dim": int(cloud.pca.basis.shape[1])}
    _write_json(os.path.join(path, "meta.json"), meta)
    _write_blob(os.path.join(path, "points.bin"), cloud.points, _F32)
    _write_blob(os.path.join(path, "feats.bin"), cloud.features, _F32)
    _write_blob(os.path.join(path, "view_ids.bin"), cloud.view_ids, _U16)
    if cloud.pixel_index is not None:
        _write_blob(os.path.join(path, "pixel_index.bin"), cloud.pixel_index, _U32)
    if cloud.pca is not None:
        _write_blob(os.path.join(path, "pca.bin"),
                    np.concatenate([cloud.pca.mean.reshape(-1), cloud.pca.basis.reshape(-1)]), _F64)


def load_featured_cloud(path):
    meta = _read_json(os.path.join(path, "meta.json"))
    _check_version(meta, CLOUD_MAGIC, path)
    try:
        n, c = int(meta["N"]), int(meta["C"])
        payloads = meta["payloads"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed meta.json ({exc})") from None
    pts = _read_blob(os.path.join(path, payloads["points"]), _F32, n * 3).reshape(n, 3)
    feats = _read_blob(os.path.join(path, payloads["features"]), _F32, n * c).reshape(n, c)
    views = _read_blob(os.path.join(path, payloads["view_ids"]), _U16, n)
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(feats))):
        raise FormatError(f"{path}: non-finite entries")
    pix = None
    if payloads.get("pixel_index"):
        pix = _read_blob(os.path.join(path, payloads["pixel_index"]), _U32, n * 2).reshape(n, 2)
    pca = None
    if payloads.get("pca"):
        cin = int(meta["pca"]["input_dim"])
        blob = _read_blob(os.path.join(path, payloads["pca"]), _F64, cin + cin * c)
        pca = PCABasis(blob[:cin].copy(), blob[cin:].reshape(cin, c).copy())
    cloud = FeaturedCloud(pts, feats, views, pix, pca)
    if n and int(meta.get("K", cloud.n_views)) < cloud.n_views:
        raise FormatError(f"{path}: view id exceeds K")
    return cloud


# ---------------------------------------------------------------------------
# lifting and merging
# ---------------------------------------------------------------------------


def sample_feature_map(fmap, u, v, width, height, mode="nearest"):
    """Feature rows for depth pixels (u, v) of a ``width`` x ``height`` grid."""
    hf, wf, _ = fmap.shape
    sx, sy = wf / width, hf / height
    if mode == "nearest":
        fu = np.minimum(np.floor(u * sx).astype(np.int64), wf - 1)
        fv = np.minimum(np.floor(v * sy).astype(np.int64), hf - 1)
        return fmap[fv, fu].astype(np.float64)
    if mode == "bilinear":
        x = np.clip((u + 0.5) * sx - 0.5, 0.0, wf - 1)
        y = np.clip((v + 0.5) * sy - 0.5, 0.0, hf - 1)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        x1 = np.minimum(x0 + 1, wf - 1)
        y1 = np.minimum(y0 + 1, hf - 1)
        ax = (x - x0)[:, None]
        ay = (y - y0)[:, None]
        f = fmap.astype(np.float64)
        top = f[y0, x0] * (1 - ax) + f[y0, x1] * ax
        bot = f[y1, x0] * (1 - ax) + f[y1, x1] * ax
        return top * (1 - ay) + bot * ay
    raise ValueError(f"unknown sampling mode {mode!r}")


def lift_features(bundle, mode="nearest", normalize=False, view_id=0):
    """Back-project a bundle and attach the image feature at each valid pixel."""
    cloud, pix = backproject_depth(bundle.depth, bundle.intrinsics, bundle.pose)
    intr = bundle.intrinsics
    feats = sample_feature_map(bundle.features, pix[:, 0], pix[:, 1], intr.width, intr.height, mode)
    if normalize:
        norm = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norm > 0, norm, 1.0)
    views = np.full(len(cloud), view_id, dtype=np.uint16)
    return FeaturedCloud(cloud.points, feats, views, pix)


def merge_views(clouds):
    """Concatenate views in order; view ids are offset so each input keeps its own block."""
    if not clouds:
        raise ValueError("nothing to merge")
    c = clouds[0].n_channels
    for cl in clouds:
        if cl.n_channels != c:
            raise FormatError(f"channel mismatch: {cl.n_channels} vs {c}")
    views = []
    offset = 0
    for cl in clouds:
        views.append(cl.view_ids.astype(np.int64) + offset)
        offset += max(cl.n_views, 1)
    if offset > np.iinfo(np.uint16).max + 1:
        raise FormatError("too many views for uint16 view ids")
    pix = None
    if all(cl.pixel_index is not None for cl in clouds):
        pix = np.concatenate([cl.pixel_index for cl in clouds])
    return FeaturedCloud(
        np.concatenate([cl.points for cl in clouds]),
        np.concatenate([cl.features for cl in clouds]),
        np.concatenate(views),
        pix,
        clouds[0].pca,
    )


def ingest_bundles(bundles, mode="nearest", normalize=False):
    return merge_views([lift_features(b, mode, normalize) for b in bundles])
