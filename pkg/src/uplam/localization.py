"""Monte Carlo localization against a panoptic grid map.

Particle likelihoods come from matching a single-frame local map against
the global map at each particle's pose: a semantic mean IoU over classes
and an instance mean IoU over matched landmark pairs, optionally with the
intersection terms weighted by the inverse local-cell uncertainty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Optional

import numpy as np

from .core import NUM_CLASSES, UNKNOWN, GridGeometry, Pose2D, is_thing, wrap_angle
from .ingest import AugmentedPoints, DEFAULT_MAX_RANGE
from .landmarks import extract_instances
from .panoptic_map import AggregationStrategy, PanopticGridMap

log = logging.getLogger(__name__)

UNCERTAINTY_FLOOR = 0.01
# lookup result for local cells that fall outside the global map extent
OUTSIDE = -2


class WeightMetric(str, Enum):
    MIOU = "miou"
    ACCURACY = "accuracy"
    COSINE = "cosine"


@dataclass(frozen=True)
class WeightConfig:
    r: float = 10.0
    use_uncertainty: bool = True
    use_instances: bool = True
    metric: WeightMetric = WeightMetric.MIOU
    # False gives the raw-score baseline: the mIoU itself is the weight
    regularize: bool = True
    epsilon: float = UNCERTAINTY_FLOOR
    # unlabelled global cells inside the map count as background (union only);
    # False excludes them from intersection and union alike
    unlabeled_as_background: bool = True

    def __post_init__(self):
        object.__setattr__(self, "metric", WeightMetric(self.metric))
        if not self.r > 0:
            raise ValueError("regularizer r must be positive")
        if not self.epsilon > 0:
            raise ValueError("uncertainty floor must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        return d


@dataclass(frozen=True)
class FilterConfig:
    num_particles: int = 100
    ess_fraction: float = 0.5
    top_fraction: float = 0.2
    init_sigma_xy: float = 1.0
    init_sigma_yaw: float = math.radians(5.0)
    noise_factor: float = 0.25
    # velocity noise floor (m/s, m/s, rad/s) keeping particles diverse on straight roads
    noise_floor: tuple[float, float, float] = (0.1, 0.1, 0.02)
    weights: WeightConfig = field(default_factory=WeightConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", WeightConfig(**self.weights))
        object.__setattr__(self, "noise_floor", tuple(float(x) for x in self.noise_floor))
        if len(self.noise_floor) != 3 or min(self.noise_floor) < 0:
            raise ValueError("noise floor needs three non-negative components")
        if self.num_particles < 5:
            raise ValueError("at least 5 particles are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


# ----------------------------------------------------------------------
# local maps

@dataclass
class LocalCells:
    """Observed cells of a single-frame local map, in the vehicle frame."""

    xy: np.ndarray  # (M, 2) cell centres
    class_id: np.ndarray  # (M,)
    uncertainty: np.ndarray  # (M,)
    instance: np.ndarray  # (M,)
    prob: np.ndarray  # (M, K)

    def __len__(self) -> int:
        return len(self.xy)

    @classmethod
    def from_map(cls, m: PanopticGridMap) -> "LocalCells":
        col, row = m.observed_cells()
        cls_r = m.class_raster()
        inst_r = m.instance_raster(cls_r)
        return cls(
            m.geometry.cell_centers(col, row),
            cls_r[row, col].astype(np.int64),
            m.uncertainty_raster()[row, col],
            inst_r[row, col],
            m.probabilities()[row, col],
        )

    @classmethod
    def empty(cls, k: int = NUM_CLASSES) -> "LocalCells":
        return cls(np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), np.zeros((0, k)))


def build_local_map(points: AugmentedPoints, resolution: float = 0.10,
                    max_range: float = DEFAULT_MAX_RANGE,
                    filter_instances: bool = True) -> PanopticGridMap:
    """Evidential map of one frame in the vehicle frame, bounded by ``max_range``."""
    if filter_instances and len(points):
        points, _, _ = extract_instances(points)
    sel = points.range <= max_range
    points = points[sel]
    if len(points) == 0:
        geom = GridGeometry(1, 1, resolution, Pose2D(0.0, 0.0, 0.0))
        return PanopticGridMap(geom, AggregationStrategy.EVIDENTIAL, points.num_classes)
    xy = points.position[:, :2]
    lo = np.floor(xy.min(axis=0) / resolution) * resolution
    hi = (np.floor(xy.max(axis=0) / resolution) + 1) * resolution
    geom = GridGeometry.covering(lo[0], lo[1], hi[0], hi[1], resolution)
    m = PanopticGridMap(geom, AggregationStrategy.EVIDENTIAL, points.num_classes)
    m.integrate_points(points, Pose2D(0.0, 0.0, 0.0))
    return m


@dataclass
class GlobalView:
    """Read-only rasters of a global map used for matching."""

    geometry: GridGeometry
    class_id: np.ndarray
    instance: np.ndarray
    prob: np.ndarray

    @classmethod
    def from_map(cls, m: PanopticGridMap) -> "GlobalView":
        c = m.class_raster()
        return cls(m.geometry, c, m.instance_raster(c), m.probabilities())

    def lookup(self, cells: LocalCells, poses: np.ndarray):
        """Global class/instance/flat index under each local cell for each pose.

        ``poses`` is (P, 3). Returns arrays of shape (P, M); cells outside the
        map get class OUTSIDE and are ignored by all scores; cells inside
        but unlabelled (UNKNOWN) count as background.
        """
        poses = np.atleast_2d(np.asarray(poses, dtype=float))
        c = np.cos(poses[:, 2])[:, None]
        s = np.sin(poses[:, 2])[:, None]
        lx = cells.xy[None, :, 0]
        ly = cells.xy[None, :, 1]
        wx = poses[:, 0:1] + c * lx - s * ly
        wy = poses[:, 1:2] + s * lx + c * ly
        g = self.geometry
        o = g.origin
        dx, dy = wx - o.x, wy - o.y
        if o.yaw != 0.0:
            co, so = math.cos(o.yaw), math.sin(o.yaw)
            dx, dy = co * dx + so * dy, -so * dx + co * dy
        col = np.floor(dx / g.resolution).astype(np.int64)
        row = np.floor(dy / g.resolution).astype(np.int64)
        inside = (col >= 0) & (col < g.width) & (row >= 0) & (row < g.height)
        flat = np.where(inside, row * g.width + col, 0)
        gcls = np.where(inside, self.class_id.reshape(-1)[flat], OUTSIDE)
        ginst = np.where(inside, self.instance.reshape(-1)[flat], 0)
        return gcls, ginst, flat, inside


# ----------------------------------------------------------------------
# matching scores

def _intersection_weights(cells: LocalCells, cfg: WeightConfig) -> np.ndarray:
    if not cfg.use_uncertainty:
        return np.ones(len(cells))
    return 1.0 / np.maximum(cells.uncertainty, cfg.epsilon)


def _valid(gclass: np.ndarray, cfg: WeightConfig) -> np.ndarray:
    if cfg.unlabeled_as_background:
        return gclass != OUTSIDE
    return gclass >= 0


def semantic_scores(cells: LocalCells, gclass: np.ndarray, cfg: WeightConfig,
                    num_classes: int = NUM_CLASSES):
    """Per-class IoU (P, K) and mIoU_K (P,) from looked-up global classes."""
    p = gclass.shape[0]
    valid = _valid(gclass, cfg)
    w = _intersection_weights(cells, cfg)
    iou = np.full((p, num_classes), np.nan)
    for k in range(num_classes):
        lk = cells.class_id == k
        gk = gclass == k
        inter = ((valid & lk[None, :] & gk) * w[None, :]).sum(axis=1)
        union = (valid & (lk[None, :] | gk)).sum(axis=1)
        has = union > 0
        iou[has, k] = inter[has] / union[has]
    defined = ~np.isnan(iou)
    n = defined.sum(axis=1)
    miou = np.where(n > 0, np.nansum(iou, axis=1) / np.maximum(n, 1), 0.0)
    return iou, miou


def instance_scores(cells: LocalCells, gclass: np.ndarray, ginst: np.ndarray,
                    cfg: WeightConfig) -> np.ndarray:
    """mIoU_L (P,): mean IoU over local instances matched to a global one.

    Instance intersections are plain cell counts; uncertainty weighting
    applies to the semantic term only.
    """
    p = gclass.shape[0]
    valid = _valid(gclass, cfg)
    total = np.zeros(p)
    pairs = np.zeros(p, dtype=np.int64)
    for lid in np.unique(cells.instance[cells.instance > 0]).tolist():
        a = cells.instance == lid
        cl = int(np.bincount(cells.class_id[a]).argmax())
        cand = np.where(valid[:, a] & (gclass[:, a] == cl), ginst[:, a], 0)
        ids = np.unique(cand[cand > 0])
        if ids.size == 0:
            continue
        counts = (cand[:, :, None] == ids[None, None, :]).sum(axis=1)
        matched = counts.max(axis=1) > 0
        g = ids[np.argmax(counts, axis=1)]  # ties -> lowest id
        b = valid & (ginst == g[:, None]) & (gclass == cl)
        av = valid & a[None, :]
        inter = (av & b).sum(axis=1)
        union = (av | b).sum(axis=1)
        ok = matched & (union > 0)
        total[ok] += inter[ok] / union[ok]
        pairs[ok] += 1
    return np.where(pairs > 0, total / np.maximum(pairs, 1), 0.0)


def accuracy_scores(cells: LocalCells, gclass: np.ndarray,
                    cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    valid = _valid(gclass, cfg)
    n = valid.sum(axis=1)
    agree = (valid & (gclass == cells.class_id[None, :])).sum(axis=1)
    return np.where(n > 0, agree / np.maximum(n, 1), 0.0)


def cosine_scores(cells: LocalCells, gview: GlobalView, flat: np.ndarray,
                  gclass: np.ndarray, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    valid = _valid(gclass, cfg)
    gp = gview.prob.reshape(-1, gview.prob.shape[-1])[flat]  # (P, M, K)
    lp = cells.prob[None, :, :]
    num = (gp * lp).sum(axis=-1)
    den = np.linalg.norm(gp, axis=-1) * np.linalg.norm(lp, axis=-1)
    cos = np.where(valid & (den > 0), num / np.where(den > 0, den, 1.0), 0.0)
    n = valid.sum(axis=1)
    return np.where(n > 0, cos.sum(axis=1) / np.maximum(n, 1), 0.0)


def semantic_iou(local: PanopticGridMap | LocalCells, global_map: PanopticGridMap | GlobalView,
                 pose: Pose2D, cfg: WeightConfig = WeightConfig()):
    """Per-class IoU array (NaN where the union is empty) and mIoU_K for one pose."""
    cells = local if isinstance(local, LocalCells) else LocalCells.from_map(local)
    gv = global_map if isinstance(global_map, GlobalView) else GlobalView.from_map(global_map)
    gcls, _, _, _ = gv.lookup(cells, np.array([pose]))
    iou, miou = semantic_scores(cells, gcls, cfg, gv.prob.shape[-1])
    return iou[0], float(miou[0])


def instance_iou(local: PanopticGridMap | LocalCells, global_map: PanopticGridMap | GlobalView,
                 pose: Pose2D, cfg: WeightConfig = WeightConfig()) -> float:
    cells = local if isinstance(local, LocalCells) else LocalCells.from_map(local)
    gv = global_map if isinstance(global_map, GlobalView) else GlobalView.from_map(global_map)
    gcls, ginst, _, _ = gv.lookup(cells, np.array([pose]))
    return float(instance_scores(cells, gcls, ginst, cfg)[0])


def particle_weight(miou_k, miou_l, cfg: WeightConfig = WeightConfig()):
    """Importance weight from semantic and instance scores.

    For the accuracy and cosine metrics, and with ``regularize`` off, the
    score itself is the weight.
    """
    miou_k = np.asarray(miou_k, dtype=float)
    miou_l = np.asarray(miou_l, dtype=float)
    if cfg.metric is not WeightMetric.MIOU:
        w = miou_k
    elif not cfg.regularize:
        w = miou_k + miou_l if cfg.use_instances else miou_k
    else:
        w = np.exp(cfg.r * miou_k)
        if cfg.use_instances:
            w = w + np.exp(cfg.r * miou_l)
    return float(w) if w.ndim == 0 else w


def log_particle_weight(miou_k, miou_l, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    """Natural log of :func:`particle_weight`, safe for large exponents."""
    miou_k = np.asarray(miou_k, dtype=float)
    miou_l = np.asarray(miou_l, dtype=float)
    if cfg.metric is WeightMetric.MIOU and cfg.regularize:
        if cfg.use_instances:
            return np.logaddexp(cfg.r * miou_k, cfg.r * miou_l)
        return cfg.r * miou_k
    w = particle_weight(miou_k, miou_l, cfg)
    with np.errstate(divide="ignore"):
        return np.log(w)


def log_likelihoods(cells: LocalCells, gview: GlobalView, poses: np.ndarray,
                    cfg: WeightConfig) -> np.ndarray:
    """Log of the unnormalised particle weights for (P, 3) poses."""
    gcls, ginst, flat, _ = gview.lookup(cells, poses)
    if cfg.metric is WeightMetric.ACCURACY:
        s = accuracy_scores(cells, gcls, cfg)
        return log_particle_weight(s, np.zeros_like(s), cfg)
    if cfg.metric is WeightMetric.COSINE:
        s = cosine_scores(cells, gview, flat, gcls, cfg)
        return log_particle_weight(s, np.zeros_like(s), cfg)
    _, mk = semantic_scores(cells, gcls, cfg, gview.prob.shape[-1])
    ml = instance_scores(cells, gcls, ginst, cfg) if cfg.use_instances else np.zeros_like(mk)
    return log_particle_weight(mk, ml, cfg)


def likelihoods(cells: LocalCells, gview: GlobalView, poses: np.ndarray,
                cfg: WeightConfig) -> np.ndarray:
    """Unnormalised particle weights for (P, 3) poses (may overflow for large scores)."""
    with np.errstate(over="ignore"):
        return np.exp(log_likelihoods(cells, gview, poses, cfg))


# ----------------------------------------------------------------------
# particle set operations

@dataclass
class ParticleSet:
    poses: np.ndarray  # (P, 3) x, y, yaw
    weights: np.ndarray  # (P,)

    def __len__(self) -> int:
        return len(self.poses)

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.poses.copy(), self.weights.copy())

    @classmethod
    def around(cls, pose: Pose2D, n: int, sigma_xy: float, sigma_yaw: float,
               rng: np.random.Generator) -> "ParticleSet":
        noise = rng.normal(size=(n, 3)) * np.array([sigma_xy, sigma_xy, sigma_yaw])
        poses = np.asarray(pose, dtype=float)[None, :] + noise
        poses[:, 2] = wrap_angle(poses[:, 2])
        return cls(poses, np.full(n, 1.0 / n))

    def normalized(self) -> "ParticleSet":
        w = self.weights
        s = w.sum()
        if not np.isfinite(s) or s <= 0:
            return ParticleSet(self.poses, np.full(len(w), 1.0 / len(w)))
        return ParticleSet(self.poses, w / s)

    def effective_sample_size(self) -> float:
        w = self.normalized().weights
        return float(1.0 / np.sum(w * w))

    def spread(self) -> float:
        """Weighted RMS distance of particle positions from their mean."""
        w = self.normalized().weights
        mu = w @ self.poses[:, :2]
        return float(np.sqrt(w @ np.sum((self.poses[:, :2] - mu) ** 2, axis=1)))


def apply_motion(poses: np.ndarray, velocity: np.ndarray, dt: float) -> np.ndarray:
    """Advance (P, 3) poses by body-frame velocities (P, 3) over ``dt``."""
    d = velocity * dt
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + c * d[:, 0] - s * d[:, 1]
    out[:, 1] = poses[:, 1] + s * d[:, 0] + c * d[:, 1]
    out[:, 2] = wrap_angle(poses[:, 2] + d[:, 2])
    return out


def predict(particles: ParticleSet, odometry, dt: float, noise_factor: float = 0.25,
            rng: Optional[np.random.Generator] = None, noise_floor=(0.0, 0.0, 0.0)) -> ParticleSet:
    """Propagate each particle with independently perturbed odometry.

    Each velocity component gets Gaussian noise with sigma ``noise_factor * |v|``,
    combined in quadrature with an optional per-component ``noise_floor``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = np.asarray(odometry, dtype=float).reshape(1, 3)
    vel = np.repeat(v, len(particles), axis=0)
    sigma = np.hypot(noise_factor * np.abs(v), np.asarray(noise_floor, dtype=float).reshape(1, 3))
    if np.any(sigma > 0):
        if rng is None:
            raise ValueError("a random generator is required for noisy prediction")
        vel = vel + rng.normal(size=vel.shape) * sigma
    return ParticleSet(apply_motion(particles.poses, vel, dt), particles.weights.copy())


def update_weights(particles: ParticleSet, cells: LocalCells, gview: GlobalView,
                   cfg: WeightConfig) -> ParticleSet:
    """Multiply in the measurement likelihood and normalise.

    An empty local map or all-zero likelihoods leave a uniform weight vector.
    """
    n = len(particles)
    if len(cells) == 0:
        log.debug("empty local map; weights reset to uniform")
        return ParticleSet(particles.poses, np.full(n, 1.0 / n))
    with np.errstate(divide="ignore"):
        logw = np.log(particles.weights) + log_likelihoods(cells, gview, particles.poses, cfg)
    top = logw.max()
    w = np.exp(logw - top) if np.isfinite(top) else np.zeros(n)
    s = w.sum()
    if not np.isfinite(s) or s <= 0:
        log.info("degenerate weights; reset to uniform")
        return ParticleSet(particles.poses, np.full(n, 1.0 / n))
    return ParticleSet(particles.poses, w / s)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling; returns indices."""
    n = len(weights)
    cum = np.cumsum(weights)
    cum /= cum[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def resample_if_needed(particles: ParticleSet, rng: np.random.Generator,
                       ess_fraction: float = 0.5) -> tuple[ParticleSet, bool]:
    p = particles.normalized()
    if p.effective_sample_size() >= ess_fraction * len(p):
        return p, False
    idx = systematic_resample(p.weights, rng)
    n = len(p)
    return ParticleSet(p.poses[idx].copy(), np.full(n, 1.0 / n)), True


def update_and_resample(particles: ParticleSet, local: LocalCells | PanopticGridMap,
                        global_map: GlobalView | PanopticGridMap, cfg: FilterConfig,
                        rng: np.random.Generator) -> ParticleSet:
    cells = local if isinstance(local, LocalCells) else LocalCells.from_map(local)
    gv = global_map if isinstance(global_map, GlobalView) else GlobalView.from_map(global_map)
    updated = update_weights(particles, cells, gv, cfg.weights)
    out, _ = resample_if_needed(updated, rng, cfg.ess_fraction)
    return out


def estimate_pose(particles: ParticleSet, top_fraction: float = 0.2) -> Pose2D:
    """Weighted mean over the highest-weight fraction of particles.

    Yaw is a circular mean. Ties in weight keep particle order.
    """
    n = len(particles)
    if n < 5:
        raise ValueError("at least 5 particles are required")
    k = max(1, math.ceil(top_fraction * n - 1e-9))
    order = np.argsort(-particles.weights, kind="stable")[:k]
    w = particles.weights[order].astype(float)
    if not np.isfinite(w.sum()) or w.sum() <= 0:
        w = np.ones(k)
    w = w / w.sum()
    sel = particles.poses[order]
    x = float(w @ sel[:, 0])
    y = float(w @ sel[:, 1])
    yaw = math.atan2(float(w @ np.sin(sel[:, 2])), float(w @ np.cos(sel[:, 2])))
    return Pose2D.make(x, y, yaw)


class ParticleFilter:
    """Single-writer filter object tying predict, update, estimate and resample."""

    def __init__(self, global_map: PanopticGridMap | GlobalView, cfg: FilterConfig,
                 rng: np.random.Generator):
        self.gview = global_map if isinstance(global_map, GlobalView) else GlobalView.from_map(global_map)
        self.cfg = cfg
        self.rng = rng
        self.particles: Optional[ParticleSet] = None
        self.resample_count = 0

    def initialize(self, pose: Pose2D) -> None:
        c = self.cfg
        self.particles = ParticleSet.around(pose, c.num_particles, c.init_sigma_xy, c.init_sigma_yaw, self.rng)

    def step(self, odometry, dt: float, cells: LocalCells) -> Pose2D:
        self.particles = predict(self.particles, odometry, dt, self.cfg.noise_factor, self.rng,
                                 self.cfg.noise_floor)
        self.particles = update_weights(self.particles, cells, self.gview, self.cfg.weights)
        est = estimate_pose(self.particles, self.cfg.top_fraction)
        self.particles, did = resample_if_needed(self.particles, self.rng, self.cfg.ess_fraction)
        self.resample_count += int(did)
        return est
