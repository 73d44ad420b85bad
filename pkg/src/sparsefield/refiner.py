"""Per-point feature refinement network, correspondence mining and contrastive training.

The network is ``refine(f) = W2 relu(W1 f + b1) + b2`` (C -> H -> C).  During
training a projection head ``z = Wg refine(f) + bg`` (C -> P) feeds an NT-Xent
loss over positive pairs mined from overlapping views.  Only the refinement
layers are used afterwards; the head is kept in the weights file for
completeness.  Weight matrices are stored ``(in, out)`` so a layer is
``x @ W + b``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import SpatialIndex

PAIR_DIST = 0.01
WEIGHTS_VERSION = 1
LAYER_ORDER = ("W1", "b1", "W2", "b2", "Wg", "bg")


class InsufficientOverlapError(ValueError):
    pass


@dataclass
class RefinerWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wg: np.ndarray
    bg: np.ndarray
    seed: int = 0
    iterations: int = 0

    @property
    def dims(self):
        c, h = self.W1.shape
        return c, h, self.Wg.shape[1]

    def params(self):
        return [getattr(self, name) for name in LAYER_ORDER]

    def copy(self):
        return RefinerWeights(*(p.copy() for p in self.params()), seed=self.seed, iterations=self.iterations)

    def flat(self):
        return np.concatenate([p.reshape(-1) for p in self.params()])

    def with_flat(self, vec):
        out = []
        pos = 0
        for p in self.params():
            out.append(np.asarray(vec[pos : pos + p.size], dtype=np.float64).reshape(p.shape))
            pos += p.size
        return RefinerWeights(*out, seed=self.seed, iterations=self.iterations)


def init_weights(c, hidden=None, proj=128, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    hidden = c if hidden is None else hidden
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    W1, b1 = layer(c, hidden)
    W2, b2 = layer(hidden, c)
    Wg, bg = layer(c, proj)
    return RefinerWeights(W1, b1, W2, b2, Wg, bg, seed=seed)


def identity_weights(c, proj=None):
    proj = c if proj is None else proj
    Wg = np.zeros((c, proj))
    Wg[: min(c, proj), : min(c, proj)] = np.eye(min(c, proj))
    return RefinerWeights(np.eye(c), np.zeros(c), np.eye(c), np.zeros(c), Wg, np.zeros(proj))


def refine(weights, features):
    """Apply the refinement network row by row."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != weights.W1.shape[0]:
        raise ValueError(f"features have {f.shape[-1]} channels, network expects {weights.W1.shape[0]}")
    h = f @ weights.W1 + weights.b1
    np.maximum(h, 0.0, out=h)
    return h @ weights.W2 + weights.b2


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------


@dataclass
class CorrespondenceSet:
    view_k: int
    view_l: int
    ids_k: np.ndarray
    ids_l: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return self.ids_k.shape[0]


def mine_correspondences(points_k, points_l, index_l=None, max_dist=PAIR_DIST, mutual=False,
                         view_k=0, view_l=1):
    """Nearest neighbour in view l of every point of view k, kept when closer than ``max_dist``."""
    pk = np.asarray(points_k, dtype=np.float64).reshape(-1, 3)
    pl = np.asarray(points_l, dtype=np.float64).reshape(-1, 3)
    if len(pk) == 0 or len(pl) == 0:
        raise ValueError("both views must be non-empty")
    index_l = SpatialIndex(pl) if index_l is None else index_l
    nn, dist = index_l.nearest(pk)
    keep = dist < max_dist
    ids_k = np.nonzero(keep)[0]
    ids_l = nn[keep]
    dist = dist[keep]
    if mutual and len(ids_k):
        back, _ = SpatialIndex(pk).nearest(pl[ids_l])
        ok = back == ids_k
        ids_k, ids_l, dist = ids_k[ok], ids_l[ok], dist[ok]
    return CorrespondenceSet(view_k, view_l, ids_k.astype(np.int64), ids_l.astype(np.int64), dist)


# ---------------------------------------------------------------------------
# NT-Xent
# ---------------------------------------------------------------------------


def ntxent_loss(z, tau, want_grad=True):
    """Mean NT-Xent loss over 2N projected vectors.

    Rows ``i`` and ``i + N`` form the positive pairs.  Each anchor's
    denominator runs over the other 2N - 1 vectors (the positive included).
    Returns ``(loss, d loss / d z)``.
    """
    z = np.asarray(z, dtype=np.float64)
    two_n = z.shape[0]
    if two_n < 2 or two_n % 2:
        raise ValueError("expected 2N rows with N >= 1")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = two_n // 2
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm projected vector")
    u = z / norms[:, None]
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    pos = np.concatenate([np.arange(n, two_n), np.arange(n)])
    rows = np.arange(two_n)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    denom = ex.sum(axis=1)
    losses = -(logits[rows, pos] - mx[:, 0] - np.log(denom))
    loss = float(losses.mean())
    if not want_grad:
        return loss, None
    soft = ex / denom[:, None]
    soft[rows, pos] -= 1.0
    g = soft / (tau * two_n)  # d loss / d sim, zero on the diagonal
    du = (g + g.T) @ u
    dz = (du - u * np.einsum("ij,ij->i", u, du)[:, None]) / norms[:, None]
    return loss, dz


def loss_and_grads(weights, x, tau):
    """Forward + backward through refine and the projection head for a 2N x C batch."""
    h = x @ weights.W1 + weights.b1
    a = np.maximum(h, 0.0)
    y = a @ weights.W2 + weights.b2
    z = y @ weights.Wg + weights.bg
    loss, dz = ntxent_loss(z, tau)
    dWg = y.T @ dz
    dbg = dz.sum(axis=0)
    dy = dz @ weights.Wg.T
    dW2 = a.T @ dy
    db2 = dy.sum(axis=0)
    da = dy @ weights.W2.T
    dh = da * (h > 0)
    dW1 = x.T @ dh
    db1 = dh.sum(axis=0)
    return loss, [dW1, db1, dW2, db2, dWg, dbg]


def grad_check(weights, batch, tau, h=1e-6, order=2):
    """Largest relative deviation between analytic and central-difference gradients.

    Per parameter the deviation is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``order=4`` switches to the five-point central stencil, whose truncation
    error is O(h^4) instead of O(h^2).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.asarray(batch, dtype=np.float64)
    _, grads = loss_and_grads(weights, x, tau)
    analytic = np.concatenate([g.reshape(-1) for g in grads])
    theta = weights.flat()

    def loss_at(i, value):
        orig = theta[i]
        theta[i] = value
        out = ntxent_loss(_project(weights.with_flat(theta), x), tau, want_grad=False)[0]
        theta[i] = orig
        return out

    numeric = np.empty_like(theta)
    for i in range(theta.size):
        t = theta[i]
        if order == 2:
            numeric[i] = (loss_at(i, t + h) - loss_at(i, t - h)) / (2 * h)
        else:
            numeric[i] = (8 * (loss_at(i, t + h) - loss_at(i, t - h))
                          - (loss_at(i, t + 2 * h) - loss_at(i, t - 2 * h))) / (12 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _project(weights, x):
    return refine(weights, x) @ weights.Wg + weights.bg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_pairs: int = 256
    temperature: float = 0.07
    step_size: float = 1e-3
    iterations: int = 1000
    seed: int = 0
    hidden: int = None  # defaults to C
    proj_dim: int = 128
    mutual: bool = False
    pair_dist: float = PAIR_DIST

    def __post_init__(self):
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class TrainResult:
    weights: RefinerWeights
    losses: list = field(default_factory=list)
    batch_pairs: int = 0
    pair_counts: dict = field(default_factory=dict)


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mine_all_pairs(cloud, cfg):
    """Correspondence sets for every unordered view pair (k < l)."""
    views = [np.nonzero(cloud.view_ids == k)[0] for k in range(cloud.n_views)]
    pts = cloud.points.astype(np.float64)
    sets = []
    for k in range(len(views)):
        for l in range(k + 1, len(views)):
            if len(views[k]) == 0 or len(views[l]) == 0:
                continue
            cs = mine_correspondences(pts[views[k]], pts[views[l]], max_dist=cfg.pair_dist,
                                      mutual=cfg.mutual, view_k=k, view_l=l)
            # store merged-cloud ids
            sets.append(CorrespondenceSet(k, l, views[k][cs.ids_k], views[l][cs.ids_l], cs.dist))
    return sets


def train_refiner(cloud, cfg=None, init=None):
    """Fit the refinement network on one multi-view scene.

    ``cloud`` is a merged :class:`FeaturedCloud` whose ``view_ids`` separate
    the views.  Each iteration draws a view pair uniformly among pairs with
    at least ``batch`` correspondences, draws ``batch`` of them without
    replacement and takes one Adam step.
    """
    cfg = TrainConfig() if cfg is None else cfg
    feats = cloud.features.astype(np.float64)
    c = feats.shape[1]
    sets = mine_all_pairs(cloud, cfg)
    best = max((len(s) for s in sets), default=0)
    if best < 1:
        raise InsufficientOverlapError(
            f"no view pair shares a point closer than {cfg.pair_dist} m ({cloud.n_views} view(s))")
    batch = min(cfg.batch_pairs, best)
    eligible = [s for s in sets if len(s) >= batch]
    rng = np.random.default_rng(cfg.seed)
    weights = init_weights(c, cfg.hidden, cfg.proj_dim, seed=cfg.seed) if init is None else init.copy()
    weights.seed = cfg.seed
    params = weights.params()
    opt = _Adam(params, cfg.step_size)
    losses = []
    for _ in range(cfg.iterations):
        s = eligible[int(rng.integers(len(eligible)))]
        sel = rng.choice(len(s), size=batch, replace=False)
        x = np.concatenate([feats[s.ids_k[sel]], feats[s.ids_l[sel]]])
        loss, grads = loss_and_grads(weights, x, cfg.temperature)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite contrastive loss")
        opt.step(params, grads)
        losses.append(loss)
    weights.iterations = cfg.iterations
    counts = {f"{s.view_k}-{s.view_l}": len(s) for s in sets}
    return TrainResult(weights, losses, batch, counts)


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------


def save_weights(weights, path):
    os.makedirs(path, exist_ok=True)
    c, h, p = weights.dims
    meta = {"magic": "sparsefield/refiner-weights", "format_version": WEIGHTS_VERSION,
            "C": c, "H": h, "P": p, "seed": int(weights.seed), "iterations": int(weights.iterations),
            "layer_order": list(LAYER_ORDER), "params": "params.bin"}
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(weights.flat(), dtype="<f8").tobytes())


def load_weights(path):
    from .scan_io import FormatError

    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("magic") != "sparsefield/refiner-weights" or meta.get("format_version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: not a refiner weights file")
    c, h, p = int(meta["C"]), int(meta["H"]), int(meta["P"])
    raw = open(os.path.join(path, meta.get("params", "params.bin")), "rb").read()
    shapes = [(c, h), (h,), (h, c), (c,), (c, p), (p,)]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(raw) != total * 8:
        raise FormatError(f"{path}: params.bin holds {len(raw)} bytes, expected {total * 8}")
    vec = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise FormatError(f"{path}: non-finite parameters")
    template = RefinerWeights(*(np.zeros(s) for s in shapes), seed=int(meta["seed"]),
                              iterations=int(meta["iterations"]))
    return template.with_flat(vec)


def write_loss_trace(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# iteration loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i} {loss!r}\n")
