"""Articulated end-effector: kinematic tree, surface sampling, collision spheres, energies.

The parameter vector is ``beta = [root rotation vector (3), root translation
(3), joint values (one per jointed link, in file order)]``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .geometry import RigidTransform

SPEC_VERSION = 1
STATE_VERSION = 1
DEFAULT_SPEN_MARGIN = 0.01


class SpecError(ValueError):
    pass


@dataclass
class Joint:
    kind: str  # "revolute" | "prismatic"
    axis: np.ndarray
    lo: float
    hi: float


@dataclass
class Link:
    name: str
    parent: int  # -1 for the root
    origin: RigidTransform
    joint: Joint = None
    sites: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weight: float = 0.0
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _right_jacobian(r):
    """Right Jacobian of SO(3) at rotation vector ``r``."""
    theta = float(np.linalg.norm(r))
    K = _skew(r)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * (K @ K))


class EffectorSpec:
    def __init__(self, links, adjacent=(), name="effector"):
        self.name = name
        self.links = list(links)
        self._validate()
        self.link_index = {l.name: i for i, l in enumerate(self.links)}
        self.order = self._topo_order()
        self.joint_links = [i for i, l in enumerate(self.links) if l.joint is not None]
        self.joint_of_link = {li: j for j, li in enumerate(self.joint_links)}
        self.lo = np.array([self.links[i].joint.lo for i in self.joint_links])
        self.hi = np.array([self.links[i].joint.hi for i in self.joint_links])
        # ancestors-or-self per link, root first
        self.chains = []
        for i in range(len(self.links)):
            chain = []
            j = i
            while j >= 0:
                chain.append(j)
                j = self.links[j].parent
            self.chains.append(chain[::-1])
        self.adjacent = self._adjacency(adjacent)
        self.sphere_link = np.concatenate(
            [np.full(len(l.radii), i, dtype=np.int64) for i, l in enumerate(self.links)]
        ) if self.links else np.zeros(0, np.int64)
        self.sphere_local = np.concatenate([l.centers for l in self.links]).reshape(-1, 3)
        self.sphere_radii = np.concatenate([l.radii for l in self.links])
        a, b = np.triu_indices(len(self.sphere_radii), k=1)
        la, lb = self.sphere_link[a], self.sphere_link[b]
        keep = np.array([x != y and (min(x, y), max(x, y)) not in self.adjacent
                         for x, y in zip(la, lb)], dtype=bool)
        self.spen_pairs = np.stack([a[keep], b[keep]], axis=1) if keep.size else np.zeros((0, 2), np.int64)

    @property
    def n_joints(self):
        return len(self.joint_links)

    @property
    def dim(self):
        return 6 + self.n_joints

    def _validate(self):
        names = [l.name for l in self.links]
        if len(set(names)) != len(names):
            raise SpecError("duplicate link names")
        roots = [l for l in self.links if l.parent < 0]
        if len(roots) != 1:
            raise SpecError(f"expected exactly one root link, found {len(roots)}")
        for l in self.links:
            if l.parent >= len(self.links):
                raise SpecError(f"link {l.name}: unknown parent")
            if l.joint is not None:
                if l.joint.kind not in ("revolute", "prismatic"):
                    raise SpecError(f"link {l.name}: unknown joint type {l.joint.kind!r}")
                if l.joint.lo > l.joint.hi:
                    raise SpecError(f"link {l.name}: joint limits out of order")
                if abs(np.linalg.norm(l.joint.axis) - 1.0) > 1e-9:
                    raise SpecError(f"link {l.name}: joint axis is not a unit vector")
            if np.any(l.radii <= 0):
                raise SpecError(f"link {l.name}: sphere radii must be positive")
            if l.weight < 0:
                raise SpecError(f"link {l.name}: negative sampling weight")
            if l.weight > 0 and len(l.sites) == 0:
                raise SpecError(f"link {l.name}: positive sampling weight but no sites")
        if not any(l.weight > 0 for l in self.links):
            raise SpecError("at least one link needs a positive sampling weight")

    def _topo_order(self):
        order, seen = [], set()
        for i in range(len(self.links)):
            path = []
            j = i
            while j >= 0 and j not in seen:
                if j in path:
                    raise SpecError("kinematic tree contains a cycle")
                path.append(j)
                j = self.links[j].parent
            for k in reversed(path):
                seen.add(k)
                order.append(k)
        return order

    def _adjacency(self, explicit):
        pairs = set()
        for i, l in enumerate(self.links):
            # nearest ancestor carrying collision geometry counts as adjacent
            p = l.parent
            while p >= 0 and len(self.links[p].radii) == 0:
                p = self.links[p].parent
            if p >= 0:
                pairs.add((min(i, p), max(i, p)))
            if l.parent >= 0:
                pairs.add((min(i, l.parent), max(i, l.parent)))
        for a, b in explicit:
            ia, ib = self.link_index[a], self.link_index[b]
            pairs.add((min(ia, ib), max(ia, ib)))
        return pairs


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


class EffectorState:
    __slots__ = ("beta",)

    def __init__(self, beta):
        b = np.array(beta, dtype=np.float64).reshape(-1)
        if b.size < 6 or not np.all(np.isfinite(b)):
            raise ValueError("state vector must be finite with at least 6 entries")
        self.beta = b

    @classmethod
    def from_parts(cls, rotvec, translation, joints):
        return cls(np.concatenate([np.asarray(rotvec, float), np.asarray(translation, float),
                                   np.asarray(joints, float).reshape(-1)]))

    @property
    def root(self):
        return RigidTransform.from_rotvec(self.beta[:3], self.beta[3:6])

    @property
    def joints(self):
        return self.beta[6:]

    def transformed(self, t):
        """State whose root pose is ``t ∘ root``; joints unchanged."""
        root = t.compose(self.root)
        return EffectorState.from_parts(root.rotvec(), root.translation, self.joints)


def save_state(state, path, spec=None):
    obj = {
        "format_version": STATE_VERSION,
        "effector": spec.name if spec is not None else None,
        "root_rotvec": [float(v) for v in state.beta[:3]],
        "root_translation": [float(v) for v in state.beta[3:6]],
        "joints": [float(v) for v in state.beta[6:]],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_state(path, spec=None):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != STATE_VERSION:
        raise SpecError(f"{path}: unsupported state format_version")
    st = EffectorState.from_parts(obj["root_rotvec"], obj["root_translation"], obj["joints"])
    if spec is not None and st.beta.size != spec.dim:
        raise SpecError(f"{path}: state has {st.beta.size} entries, effector needs {spec.dim}")
    return st


# ---------------------------------------------------------------------------
# spec file
# ---------------------------------------------------------------------------


def _origin_from_json(d):
    if d is None:
        return RigidTransform.identity()
    rot = Rotation.from_euler("xyz", d.get("rpy", [0.0, 0.0, 0.0])).as_matrix()
    return RigidTransform(rot, d.get("xyz", [0.0, 0.0, 0.0]), check=False)


def spec_from_dict(obj):
    if obj.get("format_version") != SPEC_VERSION:
        raise SpecError("unsupported effector spec format_version")
    raw = obj["links"]
    names = [l["name"] for l in raw]
    links = []
    for l in raw:
        parent = l.get("parent")
        if parent is not None and parent not in names:
            raise SpecError(f"link {l['name']}: unknown parent {parent!r}")
        joint = None
        if l.get("joint"):
            j = l["joint"]
            joint = Joint(j["type"], np.asarray(j["axis"], dtype=np.float64),
                          float(j["limits"][0]), float(j["limits"][1]))
        spheres = l.get("spheres", [])
        links.append(Link(
            name=l["name"],
            parent=-1 if parent is None else names.index(parent),
            origin=_origin_from_json(l.get("origin")),
            joint=joint,
            sites=np.asarray(l.get("sites", []), dtype=np.float64).reshape(-1, 3),
            weight=float(l.get("sample_weight", 0.0)),
            centers=np.asarray([s["center"] for s in spheres], dtype=np.float64).reshape(-1, 3),
            radii=np.asarray([s["radius"] for s in spheres], dtype=np.float64),
        ))
    return EffectorSpec(links, [tuple(p) for p in obj.get("adjacent", [])], name=obj.get("name", "effector"))


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


def spec_to_dict(spec):
    out = []
    for l in spec.links:
        rpy = Rotation.from_matrix(l.origin.rotation).as_euler("xyz")
        d = {"name": l.name, "parent": None if l.parent < 0 else spec.links[l.parent].name,
             "origin": {"xyz": [float(v) for v in l.origin.translation], "rpy": [float(v) for v in rpy]}}
        if l.joint is not None:
            d["joint"] = {"type": l.joint.kind, "axis": [float(v) for v in l.joint.axis],
                          "limits": [l.joint.lo, l.joint.hi]}
        d["sample_weight"] = l.weight
        d["sites"] = [[float(v) for v in s] for s in l.sites]
        d["spheres"] = [{"center": [float(v) for v in c], "radius": float(r)}
                        for c, r in zip(l.centers, l.radii)]
        out.append(d)
    return {"format_version": SPEC_VERSION, "name": spec.name, "links": out, "adjacent": []}


def bundled_hand_path():
    return os.path.join(os.path.dirname(__file__), "data", "simple_hand.json")


def load_bundled_hand():
    return load_spec(bundled_hand_path())


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


@dataclass
class Kinematics:
    """World transforms of every link plus each joint's world axis and origin."""

    R: np.ndarray  # (L, 3, 3)
    t: np.ndarray  # (L, 3)
    axis: np.ndarray  # (J, 3)
    pivot: np.ndarray  # (J, 3)
    root_R: np.ndarray
    root_t: np.ndarray
    root_rotvec: np.ndarray


def _check_state(spec, state):
    beta = state.beta if isinstance(state, EffectorState) else np.asarray(state, dtype=np.float64)
    if beta.size != spec.dim:
        raise ValueError(f"state has {beta.size} entries, effector needs {spec.dim}")
    return beta


def kinematics(spec, state):
    beta = _check_state(spec, state)
    nl = len(spec.links)
    R = np.zeros((nl, 3, 3))
    t = np.zeros((nl, 3))
    axis = np.zeros((spec.n_joints, 3))
    pivot = np.zeros((spec.n_joints, 3))
    root_R = Rotation.from_rotvec(beta[:3]).as_matrix()
    root_t = beta[3:6].copy()
    for i in spec.order:
        link = spec.links[i]
        if link.parent < 0:
            pR, pt = root_R, root_t
        else:
            pR, pt = R[link.parent], t[link.parent]
        fR = pR @ link.origin.rotation
        ft = pR @ link.origin.translation + pt
        if link.joint is not None:
            j = spec.joint_of_link[i]
            q = beta[6 + j]
            a = link.joint.axis
            axis[j] = fR @ a
            pivot[j] = ft
            if link.joint.kind == "revolute":
                fR = fR @ Rotation.from_rotvec(a * q).as_matrix()
            else:
                ft = ft + fR @ (a * q)
        R[i], t[i] = fR, ft
    return Kinematics(R, t, axis, pivot, root_R, root_t, beta[:3].copy())


def forward_kinematics(spec, state):
    """World transform of each link, in spec order."""
    k = kinematics(spec, state)
    return [RigidTransform(k.R[i], k.t[i], check=False) for i in range(len(spec.links))]


def place_points(kin, link_ids, local):
    """World coordinates of link-local points."""
    return np.einsum("nij,nj->ni", kin.R[link_ids], local) + kin.t[link_ids]


def point_jacobian(spec, kin, link_ids, world):
    """``d world / d beta`` for points rigidly attached to ``link_ids`` (M x 3 x D)."""
    m = len(link_ids)
    J = np.zeros((m, 3, spec.dim))
    J[:, :, 3:6] = np.eye(3)
    y = (world - kin.root_t) @ kin.root_R  # root-frame coordinates
    Jr = _right_jacobian(kin.root_rotvec)
    # d(R y)/dr = -R [y]x Jr
    ys = np.zeros((m, 3, 3))
    ys[:, 0, 1], ys[:, 0, 2] = -y[:, 2], y[:, 1]
    ys[:, 1, 0], ys[:, 1, 2] = y[:, 2], -y[:, 0]
    ys[:, 2, 0], ys[:, 2, 1] = -y[:, 1], y[:, 0]
    J[:, :, 0:3] = -np.einsum("ij,mjk,kl->mil", kin.root_R, ys, Jr)
    link_ids = np.asarray(link_ids)
    for li in np.unique(link_ids):
        rows = np.nonzero(link_ids == li)[0]
        for a in spec.chains[li]:
            if spec.links[a].joint is None:
                continue
            j = spec.joint_of_link[a]
            if spec.links[a].joint.kind == "revolute":
                J[rows, :, 6 + j] = np.cross(kin.axis[j], world[rows] - kin.pivot[j])
            else:
                J[rows, :, 6 + j] = kin.axis[j]
    return J


# ---------------------------------------------------------------------------
# surface samples
# ---------------------------------------------------------------------------


@dataclass
class SiteSelection:
    link_ids: np.ndarray
    local: np.ndarray

    def __len__(self):
        return len(self.link_ids)


@dataclass
class SurfaceSamples:
    points: np.ndarray
    link_ids: np.ndarray
    local: np.ndarray


def allocate(weights, total):
    """Largest-remainder split of ``total`` proportional to ``weights`` (ties to lower index)."""
    w = np.asarray(weights, dtype=np.float64)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - int(base.sum())
    frac = quota - base
    order = np.lexsort((np.arange(len(w)), -frac))
    base[order[:rest]] += 1
    return base


def select_sites(spec, q, seed=0):
    """Seeded choice of ``q`` surface sites; a function of (spec, q, seed) only."""
    if q < 1:
        raise ValueError("need at least one query point")
    counts = allocate([l.weight for l in spec.links], q)
    rng = np.random.default_rng(seed)
    link_ids, local = [], []
    for i, (l, n) in enumerate(zip(spec.links, counts)):
        if n == 0:
            continue
        ns = len(l.sites)
        if n <= ns:
            pick = np.sort(rng.choice(ns, size=n, replace=False))
        else:
            pick = np.concatenate([np.arange(ns) for _ in range(n // ns)]
                                  + [np.sort(rng.choice(ns, size=n % ns, replace=False))])
        link_ids.append(np.full(n, i, dtype=np.int64))
        local.append(l.sites[pick])
    return SiteSelection(np.concatenate(link_ids), np.concatenate(local))


def sample_query_points(spec, state, q, seed=0):
    sel = select_sites(spec, q, seed)
    kin = kinematics(spec, state)
    return SurfaceSamples(place_points(kin, sel.link_ids, sel.local), sel.link_ids, sel.local)


def all_sites(spec):
    ids = np.concatenate([np.full(len(l.sites), i, dtype=np.int64) for i, l in enumerate(spec.links)])
    return SiteSelection(ids, np.concatenate([l.sites for l in spec.links]).reshape(-1, 3))


def sphere_centers(spec, kin):
    return place_points(kin, spec.sphere_link, spec.sphere_local)


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def _as_kin(spec, state):
    return state if isinstance(state, Kinematics) else kinematics(spec, state)


def energy_pen(spec, state, scene, want_grad=False):
    """Scene points inside the sphere union, each weighted by its shallowest depth."""
    kin = _as_kin(spec, state)
    centers = sphere_centers(spec, kin)
    pts = scene.points if hasattr(scene, "points") else scene
    e, g_centers = kernels.penetration(pts, centers, spec.sphere_radii)
    if not want_grad:
        return e
    J = point_jacobian(spec, kin, spec.sphere_link, centers)
    return e, np.einsum("mi,mid->d", g_centers, J)


def energy_spen(spec, state, margin=DEFAULT_SPEN_MARGIN, want_grad=False):
    """Hinge on distances between sphere centres of non-adjacent links."""
    kin = _as_kin(spec, state)
    centers = sphere_centers(spec, kin)
    a, b = spec.spen_pairs[:, 0], spec.spen_pairs[:, 1]
    diff = centers[a] - centers[b]
    d = np.linalg.norm(diff, axis=1)
    active = d < margin
    e = float(np.sum(margin - d[active]))
    if not want_grad:
        return e
    g = np.zeros_like(centers)
    ok = active & (d > 0)
    unit = diff[ok] / d[ok, None]
    np.add.at(g, a[ok], -unit)
    np.add.at(g, b[ok], unit)
    J = point_jacobian(spec, kin, spec.sphere_link, centers)
    return e, np.einsum("mi,mid->d", g, J)


def energy_pose(spec, state, want_grad=False):
    """Squared distance of each joint value outside its limits."""
    beta = _check_state(spec, state.beta if isinstance(state, EffectorState) else state)
    q = beta[6:]
    over = np.maximum(q - spec.hi, 0.0)
    under = np.maximum(spec.lo - q, 0.0)
    e = float(np.sum(over * over) + np.sum(under * under))
    if not want_grad:
        return e
    g = np.zeros(spec.dim)
    g[6:] = 2.0 * over - 2.0 * under
    return e, g


# ---------------------------------------------------------------------------
# bundled simplified hand
# ---------------------------------------------------------------------------


def _segment(length, radius, rings_per_m=125.0, around=8):
    n_rings = max(2, int(round(length * rings_per_m)))
    ys = length * (np.arange(n_rings) + 0.5) / n_rings
    ang = 2 * np.pi * np.arange(around) / around
    sites = [[radius * np.cos(a), y, radius * np.sin(a)] for y in ys for a in ang]
    n_sph = max(1, int(round(length / (1.6 * radius))))
    centers = [[0.0, length * (k + 0.5) / n_sph, 0.0] for k in range(n_sph)]
    area = 2 * np.pi * radius * length
    return np.array(sites), np.array(centers), np.full(n_sph, radius), area


def simple_hand_spec(finger_density=4.0):
    """A 22-joint, five-finger hand (fingers along +y, grasp side facing -z)."""
    links = []

    def add(name, parent, xyz=(0, 0, 0), rpy=(0, 0, 0), joint=None, seg=None, density=0.0):
        origin = RigidTransform(Rotation.from_euler("xyz", rpy).as_matrix(), xyz, check=False)
        pi = -1 if parent is None else [l.name for l in links].index(parent)
        link = Link(name, pi, origin, joint)
        if seg is not None:
            sites, centers, radii, area = seg
            link.sites, link.centers, link.radii = sites, centers, radii
            link.weight = density * area
        links.append(link)

    def rev(axis, lo, hi):
        a = np.asarray(axis, dtype=np.float64)
        return Joint("revolute", a / np.linalg.norm(a), lo, hi)

    # palm: 9 x 10 x 2.5 cm box
    hx, hy, hz = 0.045, 0.05, 0.0125
    gx = np.linspace(-hx + 0.008, hx - 0.008, 6)
    gy = np.linspace(-hy + 0.008, hy - 0.008, 7)
    face = np.array([[x, y] for x in gx for y in gy])
    palm_sites = np.vstack([np.c_[face, np.full(len(face), -hz)], np.c_[face, np.full(len(face), hz)]])
    palm_centers = np.array([[x, y, 0.0] for x in (-0.03, 0.0, 0.03) for y in (-0.033, 0.0, 0.033)])
    palm_area = 2 * (2 * hx) * (2 * hy)
    add("palm", None, seg=(palm_sites, palm_centers, np.full(9, hz), palm_area), density=1.0)

    flex = (-1.0, 0.0, 0.0)
    lengths = (0.045, 0.025, 0.022)
    radii = (0.0095, 0.009, 0.0085)
    for prefix, x in (("ff", 0.033), ("mf", 0.011), ("rf", -0.011), ("lf", -0.033)):
        base = "palm"
        knuckle_xyz = (x, hy, 0.0)
        if prefix == "lf":
            add("lf_metacarpal", "palm", xyz=(x, hy - 0.03, 0.0), joint=rev((0, 1, 0), 0.0, 0.785))
            base = "lf_metacarpal"
            knuckle_xyz = (0.0, 0.03, 0.0)
        add(f"{prefix}_knuckle", base, xyz=knuckle_xyz, joint=rev((0, 0, 1), -0.349, 0.349))
        add(f"{prefix}_proximal", f"{prefix}_knuckle", joint=rev(flex, -0.262, 1.571),
            seg=_segment(lengths[0], radii[0]), density=finger_density)
        add(f"{prefix}_middle", f"{prefix}_proximal", xyz=(0, lengths[0], 0), joint=rev(flex, 0.0, 1.571),
            seg=_segment(lengths[1], radii[1]), density=finger_density)
        add(f"{prefix}_distal", f"{prefix}_middle", xyz=(0, lengths[1], 0), joint=rev(flex, 0.0, 1.571),
            seg=_segment(lengths[2], radii[2]), density=finger_density)

    add("th_base", "palm", xyz=(0.034, -0.03, -0.005), rpy=(0.0, 0.0, -np.pi / 4),
        joint=rev((0, 1, 0), -1.047, 1.047))
    add("th_proximal", "th_base", joint=rev(flex, 0.0, 1.222),
        seg=_segment(0.038, 0.0105), density=finger_density)
    add("th_hub", "th_proximal", xyz=(0, 0.038, 0), joint=rev((0, 0, 1), -0.209, 0.209))
    add("th_middle", "th_hub", joint=rev(flex, -0.698, 0.698),
        seg=_segment(0.032, 0.0095), density=finger_density)
    add("th_distal", "th_middle", xyz=(0, 0.032, 0), joint=rev(flex, -0.262, 1.571),
        seg=_segment(0.027, 0.009), density=finger_density)
    return EffectorSpec(links, name="simple-hand-22")
