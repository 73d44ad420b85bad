"""Synthetic multi-view scenes with known features and correspondences.

Objects are sampled surfaces (box, sphere shell, open bowl) carrying a smooth
feature function of object-local position.  Each camera renders the samples
with a per-pixel depth buffer; its feature map holds the sample's feature
after a fixed per-camera channel mix and seeded noise, which makes the
lifted features disagree across views in a controlled way.
"""

import json
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, RigidTransform
from .scan_io import FormatError, ScanBundle, ingest_bundles, save_scan_bundle

GT_VERSION = 1


class EmptySceneError(ValueError):
    pass


def derive_seed(seed, *tags):
    """Stable 63-bit seed from a base seed and string/int tags."""
    h = zlib.crc32(str(int(seed)).encode())
    for t in tags:
        h = zlib.crc32(str(t).encode(), h)
    return (int(seed) * 0x9E3779B1 + h) % (2**63)


@dataclass
class ObjectSpec:
    kind: str  # "box" | "sphere" | "bowl"
    size: list  # box: [sx, sy, sz]; sphere/bowl: [radius]
    translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rotvec: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def pose(self):
        return RigidTransform.from_rotvec(self.rotvec, self.translation)


def default_objects():
    return [
        ObjectSpec("box", [0.14, 0.09, 0.07], [0.0, 0.0, 0.035]),
        ObjectSpec("bowl", [0.06], [0.0, -0.15, 0.06]),
    ]


@dataclass
class SynthSceneSpec:
    objects: list = field(default_factory=default_objects)
    n_views: int = 4
    ring_radius: float = 0.6
    ring_height: float = 0.45
    ring_yaw0_deg: float = 45.0
    look_at: list = field(default_factory=lambda: [0.0, -0.03, 0.04])
    width: int = 256
    height: int = 192
    focal: float = 320.0
    density: float = 8e5  # surface samples per m^2
    channels: int = 32
    feature_rank: int = 6
    wavelength: list = field(default_factory=lambda: [0.08, 0.2])
    mix: float = 0.5
    noise: float = 0.05
    table: bool = False
    table_extent: float = 0.35
    seed: int = 0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if self.n_views < 2:
            raise ValueError("need at least two views")
        if self.density <= 0:
            raise ValueError("density must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# surfaces and features
# ---------------------------------------------------------------------------


def _sample_surface(obj, density, rng):
    """Object-local points, outward normals and a two-sided flag."""
    if obj.kind == "box":
        sx, sy, sz = (float(v) for v in obj.size)
        pts, nrm = [], []
        for axis, (a, b) in enumerate(((sy, sz), (sx, sz), (sx, sy))):
            n = max(1, int(round(density * a * b)))
            half = np.array([sx, sy, sz]) / 2
            for sign in (-1.0, 1.0):
                uv = rng.random((n, 2)) - 0.5
                p = np.zeros((n, 3))
                others = [i for i in range(3) if i != axis]
                p[:, others[0]] = uv[:, 0] * 2 * half[others[0]]
                p[:, others[1]] = uv[:, 1] * 2 * half[others[1]]
                p[:, axis] = sign * half[axis]
                nn = np.zeros((n, 3))
                nn[:, axis] = sign
                pts.append(p)
                nrm.append(nn)
        return np.vstack(pts), np.vstack(nrm), False
    if obj.kind in ("sphere", "bowl"):
        r = float(obj.size[0])
        area = 4 * np.pi * r * r if obj.kind == "sphere" else 2 * np.pi * r * r
        n = max(1, int(round(density * area)))
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if obj.kind == "bowl":
            v[:, 2] = -np.abs(v[:, 2])  # lower hemisphere, open at the top
        return r * v, v, obj.kind == "bowl"
    raise ValueError(f"unknown object kind {obj.kind!r}")


class FeatureFunction:
    """Smooth features ``B @ sin(W x + phase)`` of object-local position.

    The ``rank`` sinusoids live in a random ``channels``-dimensional embedding,
    so features are low-rank like real backbone features.
    """

    def __init__(self, channels, rank, wavelength, seed, n_objects):
        rng = np.random.default_rng(derive_seed(seed, "feature-function"))
        dirs = rng.normal(size=(rank, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = rng.uniform(wavelength[0], wavelength[1], size=rank)
        self.freq = dirs * (2 * np.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(n_objects, rank))
        self.embed = rng.normal(size=(channels, rank)) / np.sqrt(rank)

    def __call__(self, local, obj_id):
        return np.sin(local @ self.freq.T + self.phase[obj_id]) @ self.embed.T


def view_mix(channels, seed, k):
    """Seeded orthonormal channel mix of camera ``k``."""
    rng = np.random.default_rng(derive_seed(seed, "view-mix", k))
    q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
    return q * np.sign(np.diag(r))


def ring_cameras(spec):
    intr = CameraIntrinsics(spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0,
                            spec.width, spec.height)
    target = np.asarray(spec.look_at, dtype=np.float64)
    poses = []
    for k in range(spec.n_views):
        yaw = np.deg2rad(spec.ring_yaw0_deg) + 2 * np.pi * k / spec.n_views
        eye = np.array([spec.ring_radius * np.cos(yaw), spec.ring_radius * np.sin(yaw), spec.ring_height])
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        poses.append(RigidTransform(np.stack([right, down, fwd], axis=1), eye))
    return intr, poses


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    sample_ids: np.ndarray  # (N,) surface-sample id of each merged-cloud point
    true_features: np.ndarray  # (N, C)
    view_ids: np.ndarray  # (N,)
    pairs: np.ndarray  # (P, 2) merged-cloud ids showing the same sample in two views
    pair_views: np.ndarray  # (P, 2)
    transform: RigidTransform = None


@dataclass
class SynthScene:
    bundles: list
    truth: GroundTruth
    surface: np.ndarray  # all surface samples, world frame
    surface_features: np.ndarray


def _surface(spec, transform, tag):
    rng = np.random.default_rng(derive_seed(spec.seed, "surface", tag))
    fn = FeatureFunction(spec.channels, spec.feature_rank, spec.wavelength, spec.seed, len(spec.objects) + 1)
    T = RigidTransform.identity() if transform is None else transform
    pts, nrm, two, feats = [], [], [], []
    for oid, obj in enumerate(spec.objects):
        local, n_local, two_sided = _sample_surface(obj, spec.density, rng)
        pose = T.compose(obj.pose())
        pts.append(pose.apply(local))
        nrm.append(n_local @ pose.rotation.T)
        two.append(np.full(len(local), two_sided))
        feats.append(fn(local, oid))
    if spec.table:
        e = spec.table_extent
        n = int(round(spec.density * (2 * e) ** 2 / 4))  # sparser: it is removed anyway
        local = np.c_[(rng.random((n, 2)) - 0.5) * 2 * e, np.zeros(n)]
        pts.append(local)  # the table does not move with the objects
        nrm.append(np.tile([0.0, 0.0, 1.0], (n, 1)))
        two.append(np.zeros(n, dtype=bool))
        feats.append(fn(local, len(spec.objects)))
    return np.vstack(pts), np.vstack(nrm), np.concatenate(two), np.vstack(feats)


def _render(spec, intr, pose, pts, nrm, two_sided):
    """Per-pixel nearest visible sample: (sample ids, u, v, depth) in row-major pixel order."""
    cam = pose.inverse().apply(pts)
    to_cam = pose.translation - pts
    facing = two_sided | (np.einsum("ij,ij->i", nrm, to_cam) > 0)
    z = cam[:, 2]
    ok = facing & (z > 1e-3)
    u = np.round(cam[:, 0] * intr.fx / np.where(ok, z, 1.0) + intr.cx).astype(np.int64)
    v = np.round(cam[:, 1] * intr.fy / np.where(ok, z, 1.0) + intr.cy).astype(np.int64)
    ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    ids = np.nonzero(ok)[0]
    pix = v[ids] * intr.width + u[ids]
    order = np.lexsort((ids, z[ids], pix))
    ids, pix = ids[order], pix[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    ids, pix = ids[first], pix[first]
    return ids, pix % intr.width, pix // intr.width, z[ids]


def generate_scene(spec, transform=None, tag="source"):
    """Render ``spec`` (objects moved by ``transform``) into K scan bundles plus ground truth."""
    intr, poses = ring_cameras(spec)
    pts, nrm, two, true_f = _surface(spec, transform, tag)
    bundles, sample_ids, view_ids = [], [], []
    for k, pose in enumerate(poses):
        ids, u, v, z = _render(spec, intr, pose, pts, nrm, two)
        depth = np.zeros((spec.height, spec.width), dtype=np.float32)
        depth[v, u] = z
        V = view_mix(spec.channels, spec.seed, k)
        noise_rng = np.random.default_rng(derive_seed(spec.seed, "noise", tag, k))
        f = true_f[ids]
        f_view = spec.mix * (f @ V.T) + (1.0 - spec.mix) * f
        if spec.noise > 0:
            f_view = f_view + spec.noise * noise_rng.normal(size=f_view.shape)
        fmap = np.zeros((spec.height, spec.width, spec.channels), dtype=np.float32)
        fmap[v, u] = f_view
        rgb = np.zeros((spec.height, spec.width, 3), dtype=np.uint8)
        rgb[v, u] = np.clip(128 + 60 * f[:, :3], 0, 255).astype(np.uint8)
        bundles.append(ScanBundle(depth, intr, pose, fmap, rgb))
        # lifting visits valid pixels in row-major order, which is the order of ``ids``
        sample_ids.append(ids)
        view_ids.append(np.full(len(ids), k))
    if all(len(s) == 0 for s in sample_ids):
        raise EmptySceneError("no camera sees any object")
    sample_ids = np.concatenate(sample_ids)
    view_ids = np.concatenate(view_ids)
    merged = ingest_bundles(bundles)
    pairs, pair_views = _shared_sample_pairs(sample_ids, view_ids, merged.points.astype(np.float64))
    truth = GroundTruth(sample_ids, true_f[sample_ids], view_ids, pairs, pair_views, transform)
    return SynthScene(bundles, truth, pts, true_f)


def _shared_sample_pairs(sample_ids, view_ids, points, max_dist=0.01):
    order = np.lexsort((view_ids, sample_ids))
    s = sample_ids[order]
    pairs = []
    start = 0
    while start < len(s):
        end = start
        while end < len(s) and s[end] == s[start]:
            end += 1
        group = order[start:end]
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                pairs.append((group[a], group[b]))
        start = end
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        d = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        pairs = pairs[d < max_dist]
    return pairs, np.stack([view_ids[pairs[:, 0]], view_ids[pairs[:, 1]]], axis=1)


def generate_pair(spec, transform):
    """Source scene and a target scene whose objects are moved by ``transform``."""
    src = generate_scene(spec, None, "source")
    tgt = generate_scene(spec, transform, "target")
    return src, tgt


def random_transform(rng, max_yaw_deg=45.0, max_shift=0.2):
    """Yaw about world z with |yaw| <= max_yaw_deg, horizontal shift with |t| <= max_shift."""
    yaw = np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg))
    ang = rng.uniform(0, 2 * np.pi)
    rad = max_shift * np.sqrt(rng.uniform())
    return RigidTransform.from_yaw(yaw, [rad * np.cos(ang), rad * np.sin(ang), 0.0])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pair_discrepancy(features, pairs, n_random=20000, seed=0):
    """Mean feature distance over ``pairs`` relative to the mean over random point pairs."""
    f = np.asarray(features, dtype=np.float64)
    if len(pairs) == 0:
        raise ValueError("no pairs to evaluate")
    num = np.linalg.norm(f[pairs[:, 0]] - f[pairs[:, 1]], axis=1).mean()
    rng = np.random.default_rng(seed)
    i = rng.integers(len(f), size=n_random)
    j = rng.integers(len(f), size=n_random)
    den = np.linalg.norm(f[i] - f[j], axis=1).mean()
    return float(num / den) if den > 0 else 0.0


def eval_transfer(beta_star, transform, spec, beta_hat):
    """Root rotation error (deg), root translation error (cm) and mean site displacement (cm)."""
    from .effector import EffectorState, all_sites, kinematics, place_points

    T = RigidTransform.identity() if transform is None else transform
    b_star = beta_star if isinstance(beta_star, EffectorState) else EffectorState(beta_star)
    b_hat = beta_hat if isinstance(beta_hat, EffectorState) else EffectorState(beta_hat)
    truth = b_hat.transformed(T)
    R_err = truth.root.rotation.T @ b_star.root.rotation
    # the rotvec norm stays accurate near zero, unlike acos of the trace
    rot_deg = float(np.degrees(Rotation.from_matrix(R_err).magnitude()))
    trans_cm = float(100 * np.linalg.norm(truth.root.translation - b_star.root.translation))
    sel = all_sites(spec)
    p_true = place_points(kinematics(spec, truth), sel.link_ids, sel.local)
    p_star = place_points(kinematics(spec, b_star), sel.link_ids, sel.local)
    disp_cm = float(100 * np.linalg.norm(p_true - p_star, axis=1).mean())
    return {"root_rotation_deg": rot_deg, "root_translation_cm": trans_cm, "mean_displacement_cm": disp_cm}


def write_metrics(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric value\n")
        for k, v in metrics.items():
            fh.write(f"{k} {v!r}\n")


# ---------------------------------------------------------------------------
# demonstration placement
# ---------------------------------------------------------------------------


def demo_state(hand, scene_points, spec=None, margin=0.004, curl=0.5):
    """A penetration-free top grasp over the first object.

    Palm faces down above the object, fingers curled by ``curl`` rad per
    joint; the hand is lowered from above until just before it touches the
    scene, then backed off by ``margin``.
    """
    from .effector import EffectorState, energy_pen

    spec = SynthSceneSpec() if spec is None else spec
    obj = spec.objects[0]
    top = float(obj.translation[2]) + (float(obj.size[2]) / 2 if obj.kind == "box" else float(obj.size[0]))
    joints = np.clip(np.full(hand.n_joints, curl), hand.lo, hand.hi)
    for j, li in enumerate(hand.joint_links):
        name = hand.links[li].name
        if "knuckle" in name or "hub" in name or "metacarpal" in name:
            joints[j] = 0.0
    # the grasp side (-z) already faces down at zero root rotation
    rotvec = np.zeros(3)
    xy = np.array(obj.translation[:2], dtype=np.float64) + np.array([0.0, -0.01])
    pts = np.asarray(scene_points, dtype=np.float64)

    def state_at(z):
        return EffectorState.from_parts(rotvec, [xy[0], xy[1], z], joints)

    z = top + 0.15
    while energy_pen(hand, state_at(z), pts) == 0.0 and z > top - 0.05:
        z -= 0.001
    return state_at(z + 0.001 + margin)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_scene(scene, path, spec=None):
    """Write K bundle directories plus groundtruth.json, pairs.bin and true_features.bin."""
    os.makedirs(path, exist_ok=True)
    for k, b in enumerate(scene.bundles):
        save_scan_bundle(b, os.path.join(path, f"view_{k}"))
    gt = scene.truth
    with open(os.path.join(path, "pairs.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(gt.pairs, dtype="<u4").tobytes())
    with open(os.path.join(path, "true_features.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(gt.true_features, dtype="<f4").tobytes())
    with open(os.path.join(path, "sample_ids.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(gt.sample_ids, dtype="<u4").tobytes())
    meta = {
        "format_version": GT_VERSION,
        "K": len(scene.bundles),
        "N": int(len(gt.sample_ids)),
        "C": int(gt.true_features.shape[1]),
        "views": [f"view_{k}" for k in range(len(scene.bundles))],
        "view_counts": [int(np.sum(gt.view_ids == k)) for k in range(len(scene.bundles))],
        "n_pairs": int(len(gt.pairs)),
        "transform": None if gt.transform is None else [float(v) for v in gt.transform.matrix().reshape(-1)],
        "payloads": {"pairs": "pairs.bin", "true_features": "true_features.bin", "sample_ids": "sample_ids.bin"},
    }
    if spec is not None:
        meta["spec"] = spec.to_dict()
    with open(os.path.join(path, "groundtruth.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_groundtruth(path):
    """Read a ground-truth directory (or its groundtruth.json)."""
    if os.path.isdir(path):
        path = os.path.join(path, "groundtruth.json")
    root = os.path.dirname(path)
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != GT_VERSION:
        raise FormatError(f"{path}: unsupported ground-truth version")
    n, c, p = int(meta["N"]), int(meta["C"]), int(meta["n_pairs"])

    def blob(name, dtype, count):
        raw = open(os.path.join(root, meta["payloads"][name]), "rb").read()
        if len(raw) != count * np.dtype(dtype).itemsize:
            raise FormatError(f"{name}: size mismatch")
        return np.frombuffer(raw, dtype=dtype)

    pairs = blob("pairs", "<u4", 2 * p).reshape(p, 2).astype(np.int64)
    feats = blob("true_features", "<f4", n * c).reshape(n, c).astype(np.float64)
    sids = blob("sample_ids", "<u4", n).astype(np.int64)
    view_ids = np.repeat(np.arange(meta["K"]), meta["view_counts"])
    T = None if meta["transform"] is None else RigidTransform.from_matrix(meta["transform"])
    pv = np.stack([view_ids[pairs[:, 0]], view_ids[pairs[:, 1]]], axis=1) if p else np.zeros((0, 2), np.int64)
    return GroundTruth(sids, feats, view_ids, pairs, pv, T), meta
