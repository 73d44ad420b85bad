"""Pose transfer: total energy over source/target feature fields and its minimisation."""

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .effector import (
    DEFAULT_SPEN_MARGIN,
    EffectorState,
    energy_pen,
    energy_pose,
    energy_spen,
    kinematics,
    place_points,
    point_jacobian,
    select_sites,
)
from .geometry import RigidTransform

LAMBDA_PEN = 1e-1
LAMBDA_SPEN = 1e-2
LAMBDA_POSE = 1e-2


class OptimizationError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class EnergyConfig:
    lambda_pen: float = LAMBDA_PEN
    lambda_spen: float = LAMBDA_SPEN
    lambda_pose: float = LAMBDA_POSE
    spen_margin: float = DEFAULT_SPEN_MARGIN
    reduction: str = "mean"  # "mean" | "sum" over the Q x C feature differences
    n_queries: int = 64
    grad_mode: str = "analytic"  # "analytic" | "fd"
    fd_step: float = 1e-3
    step_size: float = 1e-2
    step_decay: float = 0.05  # learning rate decays geometrically to this fraction
    iterations: int = 300
    grad_tol: float = 1e-6
    restarts: int = 4
    screen_iterations: int = 60
    restart_yaw_deg: float = 45.0
    restart_shift: float = 0.01
    init: str = "centroid"  # "demo" | "centroid"
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_pen, self.lambda_spen, self.lambda_pose) < 0:
            raise ValueError("energy weights must be non-negative")
        if self.grad_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.grad_mode == "fd" and self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.init not in ("demo", "centroid"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class OptimTrace:
    betas: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    terms: list = field(default_factory=list)  # dicts: feature, pen, spen, pose
    start: int = 0

    def append(self, beta, total, terms):
        self.betas.append(np.array(beta, dtype=np.float64))
        self.totals.append(float(total))
        self.terms.append(dict(terms))

    def __len__(self):
        return len(self.totals)

    def best(self):
        i = int(np.argmin(self.totals))
        return i, self.betas[i], self.totals[i]


class EnergyModel:
    """Total energy of a target-scene state relative to a fixed demonstration."""

    def __init__(self, source_field, target_field, spec, beta_hat, cfg=None, target_points=None):
        self.cfg = EnergyConfig() if cfg is None else cfg
        self.spec = spec
        self.target = target_field
        self.scene = target_field.points if target_points is None else np.asarray(target_points, np.float64)
        b_hat = beta_hat.beta if isinstance(beta_hat, EffectorState) else np.asarray(beta_hat, np.float64)
        self.beta_hat = b_hat
        self.sites = select_sites(spec, self.cfg.n_queries, self.cfg.seed)
        demo_pts = place_points(kinematics(spec, b_hat), self.sites.link_ids, self.sites.local)
        self.demo_features = source_field.query_batch(demo_pts)
        if target_field.n_channels != source_field.n_channels:
            raise ValueError("source and target fields have different channel counts")
        self.evaluations = 0

    def _scale(self):
        q, c = self.demo_features.shape
        return 1.0 / (q * c) if self.cfg.reduction == "mean" else 1.0

    def feature_energy(self, beta, want_grad=False, kin=None):
        kin = kinematics(self.spec, beta) if kin is None else kin
        pts = place_points(kin, self.sites.link_ids, self.sites.local)
        if not want_grad:
            vals = self.target.query_batch(pts)
            return float(np.abs(vals - self.demo_features).sum() * self._scale())
        vals, grads, _ = self.target.query_with_gradient(pts)
        diff = vals - self.demo_features
        e = float(np.abs(diff).sum() * self._scale())
        d_vals = np.sign(diff) * self._scale()
        d_pts = np.einsum("qc,qcd->qd", d_vals, grads)
        J = point_jacobian(self.spec, kin, self.sites.link_ids, pts)
        return e, np.einsum("qi,qid->d", d_pts, J)

    def evaluate(self, beta, want_grad=False):
        """Total energy, per-term breakdown and (optionally) the analytic gradient."""
        self.evaluations += 1
        beta = np.asarray(beta, dtype=np.float64)
        kin = kinematics(self.spec, beta)
        cfg = self.cfg
        if want_grad:
            ef, gf = self.feature_energy(beta, True, kin)
            ep, gp = energy_pen(self.spec, kin, self.scene, want_grad=True)
            es, gs = energy_spen(self.spec, kin, cfg.spen_margin, want_grad=True)
            eo, go = energy_pose(self.spec, beta, want_grad=True)
            grad = gf + cfg.lambda_pen * gp + cfg.lambda_spen * gs + cfg.lambda_pose * go
        else:
            ef = self.feature_energy(beta, False, kin)
            ep = energy_pen(self.spec, kin, self.scene)
            es = energy_spen(self.spec, kin, cfg.spen_margin)
            eo = energy_pose(self.spec, beta)
            grad = None
        total = ef + cfg.lambda_pen * ep + cfg.lambda_spen * es + cfg.lambda_pose * eo
        terms = {"feature": ef, "pen": ep, "spen": es, "pose": eo}
        return total, terms, grad

    def fd_gradient(self, beta, h=None):
        h = self.cfg.fd_step if h is None else h
        beta = np.asarray(beta, dtype=np.float64)
        g = np.zeros_like(beta)
        for i in range(beta.size):
            bp = beta.copy()
            bm = beta.copy()
            bp[i] += h
            bm[i] -= h
            g[i] = (self.evaluate(bp)[0] - self.evaluate(bm)[0]) / (2 * h)
        return g

    def gradient(self, beta):
        if self.cfg.grad_mode == "fd":
            total, terms, _ = self.evaluate(beta)
            return total, terms, self.fd_gradient(beta)
        return self.evaluate(beta, want_grad=True)


def feature_energy(source_field, target_field, spec, beta_hat, beta, n_queries=64, seed=0,
                   reduction="mean"):
    cfg = EnergyConfig(n_queries=n_queries, seed=seed, reduction=reduction)
    model = EnergyModel(source_field, target_field, spec, beta_hat, cfg)
    b = beta.beta if isinstance(beta, EffectorState) else beta
    return model.feature_energy(np.asarray(b, dtype=np.float64))


def total_energy(source_field, target_field, spec, beta_hat, beta, cfg=None, target_points=None):
    """``(total, terms)`` with terms ``feature``, ``pen``, ``spen``, ``pose``."""
    model = EnergyModel(source_field, target_field, spec, beta_hat, cfg, target_points)
    b = beta.beta if isinstance(beta, EffectorState) else beta
    total, terms, _ = model.evaluate(np.asarray(b, dtype=np.float64))
    return total, terms


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------


class _Run:
    """One Adam descent from a start state; resumable."""

    def __init__(self, model, beta0, cfg):
        self.model = model
        self.cfg = cfg
        self.beta = np.array(beta0, dtype=np.float64)
        self.m = np.zeros_like(self.beta)
        self.v = np.zeros_like(self.beta)
        self.t = 0
        self.trace = OptimTrace()
        self.converged = False

    def advance(self, n_steps):
        cfg = self.cfg
        for _ in range(n_steps):
            if self.converged or self.t > cfg.iterations:
                return
            total, terms, grad = self.model.gradient(self.beta)
            if not (np.isfinite(total) and np.all(np.isfinite(grad))):
                self.trace.append(self.beta, total, terms)
                raise OptimizationError(f"non-finite energy at iteration {self.t}", self.trace)
            self.trace.append(self.beta, total, terms)
            if self.t == cfg.iterations or np.linalg.norm(grad) < cfg.grad_tol:
                self.converged = True
                return
            self.t += 1
            lr = cfg.step_size * cfg.step_decay ** ((self.t - 1) / max(cfg.iterations - 1, 1))
            self.m = 0.9 * self.m + 0.1 * grad
            self.v = 0.999 * self.v + 0.001 * grad * grad
            mh = self.m / (1 - 0.9**self.t)
            vh = self.v / (1 - 0.999**self.t)
            self.beta = self.beta - lr * mh / (np.sqrt(vh) + 1e-12)

    def best_total(self):
        return min(self.trace.totals) if len(self.trace) else np.inf


def start_states(spec, beta_hat, cfg, source_centroid=None, target_centroid=None):
    """Initial state plus ``cfg.restarts`` seeded root-pose perturbations.

    Restarts rotate the start about the vertical axis through the target
    centroid, spread evenly over ``±restart_yaw_deg`` with seeded jitter, and
    shift it by seeded noise of scale ``restart_shift``.
    """
    b0 = EffectorState(beta_hat.beta if isinstance(beta_hat, EffectorState) else beta_hat)
    if cfg.init == "centroid" and source_centroid is not None and target_centroid is not None:
        shift = np.asarray(target_centroid, float) - np.asarray(source_centroid, float)
        b0 = b0.transformed(RigidTransform(None, shift))
    starts = [b0.beta]
    if cfg.restarts <= 0:
        return starts
    rng = np.random.default_rng(cfg.seed)
    pivot = b0.root.translation if target_centroid is None else np.asarray(target_centroid, float)
    m = (cfg.restarts + 1) // 2
    spacing = cfg.restart_yaw_deg / m
    yaws = [sign * spacing * k for k in range(1, m + 1) for sign in (1.0, -1.0)][: cfg.restarts]
    for yaw in yaws:
        yaw = yaw + rng.uniform(-0.25, 0.25) * spacing
        shift = rng.normal(scale=cfg.restart_shift, size=3)
        shift[2] = 0.0
        to_pivot = RigidTransform(None, -pivot)
        back = RigidTransform(None, pivot + shift)
        T = back.compose(RigidTransform.from_yaw(np.deg2rad(yaw))).compose(to_pivot)
        starts.append(b0.transformed(T).beta)
    return starts


def optimize_pose(source_field, target_field, spec, beta_hat, cfg=None, target_points=None, init=None):
    """Minimise the total energy over the effector state in the target scene.

    Every start is screened for ``screen_iterations`` Adam steps; the start
    with the lowest energy seen continues up to ``iterations``.  Returns the
    lowest-energy state visited by that run and its trace.  An explicit
    ``init`` state replaces the configured first start; restarts perturb it.
    """
    cfg = EnergyConfig() if cfg is None else cfg
    model = EnergyModel(source_field, target_field, spec, beta_hat, cfg, target_points)
    if init is None:
        starts = start_states(spec, beta_hat, cfg, source_field.points.mean(axis=0),
                              target_field.points.mean(axis=0))
    else:
        starts = start_states(spec, init, dataclasses.replace(cfg, init="demo"), None,
                              target_field.points.mean(axis=0))
    runs = [_Run(model, b, cfg) for b in starts]
    if len(runs) > 1:
        for r in runs:
            r.advance(min(cfg.screen_iterations, cfg.iterations + 1))
        winner = min(range(len(runs)), key=lambda i: (runs[i].best_total(), i))
    else:
        winner = 0
    run = runs[winner]
    run.advance(cfg.iterations + 1)
    run.trace.start = winner
    _, beta, _ = run.trace.best()
    return EffectorState(beta), run.trace


def write_trace(path, trace):
    dim = len(trace.betas[0]) if len(trace) else 0
    with open(path, "w", encoding="utf-8") as fh:
        cols = ["iter", "total", "feature", "pen", "spen", "pose"] + [f"beta_{i}" for i in range(dim)]
        fh.write(f"# start {trace.start}\n")
        fh.write(" ".join(cols) + "\n")
        for i, (b, tot, terms) in enumerate(zip(trace.betas, trace.totals, trace.terms)):
            vals = [tot, terms["feature"], terms["pen"], terms["spen"], terms["pose"], *b]
            fh.write(f"{i} " + " ".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# energy grids
# ---------------------------------------------------------------------------

GRID_MAGIC = b"SFEGRID1"
_GRID_HEADER = struct.Struct("<8s3I6d")


@dataclass
class GridSpec:
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        self.shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in self.shape) or np.any(self.hi <= self.lo):
            raise ValueError("grid needs a positive extent and at least one cell per axis")

    @property
    def cell(self):
        return (self.hi - self.lo) / np.array(self.shape)

    def centers(self):
        axes = [self.lo[a] + (np.arange(self.shape[a]) + 0.5) * self.cell[a] for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([x.reshape(-1) for x in g], axis=1)

    def cell_of(self, p):
        idx = np.floor((np.asarray(p, float) - self.lo) / self.cell).astype(np.int64)
        return tuple(int(i) for i in idx)

    @classmethod
    def around(cls, center, half_extent, n):
        c = np.asarray(center, dtype=np.float64)
        return cls(c - half_extent, c + half_extent, (n, n, n))


def export_energy_grid(source_field, target_field, spec, beta_hat, grid, cfg=None):
    """Feature energy with the effector root moved to each cell centre (rotation, joints fixed)."""
    cfg = EnergyConfig() if cfg is None else cfg
    model = EnergyModel(source_field, target_field, spec, beta_hat, cfg)
    b = model.beta_hat
    kin = kinematics(spec, b)
    local = place_points(kin, model.sites.link_ids, model.sites.local) - kin.root_t
    centers = grid.centers()
    pts = (centers[:, None, :] + local[None, :, :]).reshape(-1, 3)
    vals = target_field.query_batch(pts).reshape(len(centers), len(local), -1)
    e = np.abs(vals - model.demo_features[None]).sum(axis=(1, 2)) * model._scale()
    return e.reshape(grid.shape)


def save_energy_grid(path, values, grid):
    values = np.asarray(values)
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, *grid.shape, *grid.lo, *grid.hi))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_energy_grid(path):
    from .scan_io import FormatError

    raw = open(path, "rb").read()
    if len(raw) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, nx, ny, nz, *bounds = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic")
    body = raw[_GRID_HEADER.size :]
    if len(body) != nx * ny * nz * 4:
        raise FormatError(f"{path}: expected {nx * ny * nz * 4} payload bytes, found {len(body)}")
    grid = GridSpec(bounds[:3], bounds[3:], (nx, ny, nz))
    return np.frombuffer(body, dtype="<f4").reshape(nx, ny, nz).copy(), grid
