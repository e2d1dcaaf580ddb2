"""Synthetic 2.5-D driving world with a simulated evidential perception stage.

The world is a flat ground plane carrying road surface labels, vertical
billboards for traffic signs and lights, and vertical backdrop walls that
return LiDAR points but carry no class. A pinhole camera is ray-cast per
pixel; the LiDAR is ray-cast per beam.

Perception errors are tied to world patches: each patch has a latent
accuracy ``c`` and is either consistently right or consistently wrong
(probability ``1 - c``), so repeated observations of a place make the same
mistake. The emitted confidence, defined as one minus the normalised entropy
of the pixel's probability vector, equals ``c`` in calibrated mode and is
distorted in the miscalibrated modes. On top of that come independent
per-frame label flips, image-region corruption and leaking instance edges.

Frames use the LiDAR frame as the vehicle frame: x forward, y left, z up,
origin at the sensor. Map-frame landmark heights are measured in the same
convention (relative to the LiDAR mount).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import (
    DRIVABLE_AREA,
    NUM_CLASSES,
    ROAD_MARKING,
    TRAFFIC_LIGHT,
    TRAFFIC_SIGN,
    UNKNOWN,
    GridGeometry,
    Pose2D,
    is_thing,
    relative_pose,
    wrap_angle,
)
from .evidential import normalized_entropy, peak_probability_for_entropy
from .ingest import CameraModel, PerceptionFrame
from .panoptic_map import AggregationStrategy, Landmark, PanopticGridMap


class InfeasibleTrajectoryError(ValueError):
    """Requested trajectory leaves the road or the world extent."""


class Miscalibration(str, Enum):
    CALIBRATED = "calibrated"
    OVERCONFIDENT = "overconfident"
    UNDERCONFIDENT = "underconfident"


# ----------------------------------------------------------------------
# world description

@dataclass
class RoadSpec:
    centerline: np.ndarray  # (N, 2) densely sampled
    width: float = 7.0
    center_dash: Optional[tuple[float, float]] = (3.0, 6.0)  # dash, gap (m)
    edge_lines: bool = True
    line_width: float = 0.15
    crosswalks: tuple[float, ...] = ()  # stations of zebra crossings
    stop_lines: tuple[float, ...] = ()  # stations of stop lines on the right lane


@dataclass
class LandmarkSpec:
    class_id: int
    x: float
    y: float
    z: float  # bottom edge above ground
    width: float
    height: float
    yaw: float  # direction of the billboard normal

    def __post_init__(self):
        if not is_thing(self.class_id):
            raise ValueError("landmarks must be of a thing class")

    @property
    def segment(self) -> np.ndarray:
        t = np.array([-math.sin(self.yaw), math.cos(self.yaw)])
        c = np.array([self.x, self.y])
        return np.stack([c - 0.5 * self.width * t, c + 0.5 * self.width * t])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z + 0.5 * self.height])


@dataclass
class WorldSpec:
    roads: list[RoadSpec]
    landmarks: list[LandmarkSpec]
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    markings: list[tuple[np.ndarray, float]] = field(default_factory=list)
    walls: list[np.ndarray] = field(default_factory=list)
    wall_height: float = 8.0
    seed: int = 0

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        for lm in self.landmarks:
            if not (xmin <= lm.x <= xmax and ymin <= lm.y <= ymax):
                raise ValueError(f"landmark at ({lm.x}, {lm.y}) outside the extent")
        for road in self.roads:
            c = road.centerline
            if c.min(axis=0)[0] < xmin or c.min(axis=0)[1] < ymin or c.max(axis=0)[0] > xmax or c.max(axis=0)[1] > ymax:
                raise ValueError("road centreline leaves the extent")


def arc_polyline(pieces: Sequence[tuple[float, float]], start: Pose2D = Pose2D(0.0, 0.0, 0.0),
                 step: float = 0.05) -> np.ndarray:
    """Polyline from (length, curvature) pieces, sampled every ``step`` meters."""
    x, y, h = start
    pts = [(x, y)]
    for length, kappa in pieces:
        n = max(1, int(round(length / step)))
        ds = length / n
        for _ in range(n):
            if abs(kappa) < 1e-12:
                x += ds * math.cos(h)
                y += ds * math.sin(h)
            else:
                h2 = h + kappa * ds
                x += (math.sin(h2) - math.sin(h)) / kappa
                y += (math.cos(h) - math.cos(h2)) / kappa
                h = h2
            pts.append((x, y))
    return np.array(pts)


class Polyline:
    """Densely sampled polyline with station/heading lookup."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        seg = np.diff(self.points, axis=0)
        self.seglen = np.linalg.norm(seg, axis=1)
        self.station = np.concatenate([[0.0], np.cumsum(self.seglen)])
        tang = np.vstack([seg, seg[-1:]])
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        self.tangent = tang
        self.tree = cKDTree(self.points)

    @property
    def length(self) -> float:
        return float(self.station[-1])

    def at(self, s: float) -> tuple[np.ndarray, float]:
        """Position and heading at station ``s``."""
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.clip(np.searchsorted(self.station, s, side="right") - 1, 0, len(self.seglen) - 1))
        f = (s - self.station[i]) / self.seglen[i] if self.seglen[i] > 0 else 0.0
        p = self.points[i] + f * (self.points[i + 1] - self.points[i])
        t = self.points[i + 1] - self.points[i]
        return p, math.atan2(t[1], t[0])

    def project(self, xy: np.ndarray, max_dist: float = np.inf):
        """Nearest station and signed lateral offset (left positive) of points."""
        d, i = self.tree.query(xy, distance_upper_bound=max_dist)
        ok = np.isfinite(d)
        i = np.where(ok, i, 0)
        rel = xy - self.points[i]
        t = self.tangent[i]
        lat = t[:, 0] * rel[:, 1] - t[:, 1] * rel[:, 0]
        lon = t[:, 0] * rel[:, 0] + t[:, 1] * rel[:, 1]
        return self.station[i] + lon, lat, ok


# ----------------------------------------------------------------------
# sensors and noise

@dataclass
class SensorSpec:
    image_width: int = 320
    image_height: int = 180
    focal: float = 200.0
    camera_pitch_deg: float = 10.0  # positive looks down
    camera_offset: tuple[float, float, float] = (0.3, 0.0, -0.2)  # in the LiDAR frame
    lidar_height: float = 1.8
    lidar_channels: int = 64
    lidar_elevation_deg: tuple[float, float] = (-25.0, 7.0)
    lidar_azimuth_fov_deg: float = 84.0
    lidar_azimuth_res_deg: float = 0.3
    max_range: float = 40.0
    range_noise: float = 0.01
    frame_rate: float = 10.0

    def camera(self) -> CameraModel:
        p = math.radians(self.camera_pitch_deg)
        # LiDAR axes (x fwd, y left, z up) -> optical axes (x right, y down, z fwd)
        base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        pitch = np.array([
            [math.cos(p), 0.0, math.sin(p)],
            [0.0, 1.0, 0.0],
            [-math.sin(p), 0.0, math.cos(p)],
        ])  # rotation about the LiDAR y axis, tilting the view down
        r = base @ pitch.T
        c = np.asarray(self.camera_offset, dtype=float)
        t = -r @ c
        return CameraModel.from_params(
            self.focal, self.focal, (self.image_width - 1) / 2.0, (self.image_height - 1) / 2.0,
            self.image_width, self.image_height, r, t,
        )

    def lidar_directions(self) -> np.ndarray:
        el = np.radians(np.linspace(*self.lidar_elevation_deg, self.lidar_channels))
        half = 0.5 * self.lidar_azimuth_fov_deg
        az = np.radians(np.arange(-half, half + 1e-9, self.lidar_azimuth_res_deg))
        e, a = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class RegionCorruption:
    """Image-space rectangle (fractions of width/height) with systematic errors.

    With ``shift`` set, ground labels inside the box are read from the
    ground-truth surface displaced by that vehicle-frame offset; otherwise a
    fraction ``flip_prob`` of labelled pixels gets the next class id.
    Pixels inside the box report ``confidence``.
    """

    box: tuple[float, float, float, float]
    flip_prob: float = 1.0
    shift: Optional[tuple[float, float]] = None
    confidence: Optional[float] = None


@dataclass
class NoiseSpec:
    label_flip_prob: float = 0.0
    temperature: float = 1.0
    miscalibration: Miscalibration = Miscalibration.CALIBRATED
    miscalibration_strength: float = 0.3
    stuff_confidence: tuple[float, float] = (5.0, 1.5)  # Beta(a, b) of patch accuracy
    thing_confidence: tuple[float, float] = (30.0, 1.0)
    patch_size: float = 2.0
    region_corruptions: list[RegionCorruption] = field(default_factory=list)
    leak_fraction: float = 0.0
    leak_width: int = 1
    leak_confidence: float = 0.9
    odometry_factor: float = 0.25

    def __post_init__(self):
        self.miscalibration = Miscalibration(self.miscalibration)
        self.region_corruptions = [
            r if isinstance(r, RegionCorruption) else RegionCorruption(**r) for r in self.region_corruptions
        ]
        for p in (self.label_flip_prob, self.leak_fraction) + tuple(r.flip_prob for r in self.region_corruptions):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.miscalibration_strength <= 1.0:
            raise ValueError("miscalibration strength must lie in (0, 1]")


def emitted_confidence(accuracy: np.ndarray, mode: Miscalibration, strength: float) -> np.ndarray:
    """Confidence the simulated network reports for a given true accuracy."""
    a = np.asarray(accuracy, dtype=float)
    if mode is Miscalibration.OVERCONFIDENT:
        return 1.0 - (1.0 - a) * strength
    if mode is Miscalibration.UNDERCONFIDENT:
        return a * (1.0 - strength)
    return a


_CONF_MIN, _CONF_MAX = 0.01, 0.995


class _EvidenceTable:
    """Maps confidence to the peak probability of a one-peak evidence vector."""

    def __init__(self, k: int, n: int = 4001):
        self.k = k
        self.conf = np.linspace(0.0, 1.0, n)
        self.peak = peak_probability_for_entropy(1.0 - self.conf, k)

    def alpha(self, labels: np.ndarray, conf: np.ndarray, temperature: float) -> np.ndarray:
        c = np.clip(conf, _CONF_MIN, _CONF_MAX)
        q = np.interp(c, self.conf, self.peak)
        a = np.full(labels.shape + (self.k,), temperature, dtype=float)
        peak = temperature * q * (self.k - 1) / (1.0 - q)
        idx = np.nonzero(labels >= 0)
        a[idx + (labels[idx],)] = peak[idx]
        a[labels < 0] = 0.0
        return a


# ----------------------------------------------------------------------
# ground truth

@dataclass
class GroundTruth:
    geometry: GridGeometry
    ground_class: np.ndarray  # (H, W) surface labels without landmarks
    class_id: np.ndarray  # (H, W) with landmark footprints
    instance: np.ndarray  # (H, W) landmark ids (index + 1)
    landmarks: dict[int, Landmark]

    def to_map(self, num_classes: int = NUM_CLASSES) -> PanopticGridMap:
        m = PanopticGridMap(self.geometry, AggregationStrategy.EVIDENTIAL, num_classes)
        m.set_labels(self.class_id, self.instance)
        for lid, lm in self.landmarks.items():
            m.landmarks[lid] = Landmark(lm.id, lm.class_id, lm.center.copy(), lm.count)
        m.next_instance_id = max(self.landmarks, default=0) + 1
        return m


def rasterize_world(world: WorldSpec, resolution: float = 0.10, lidar_height: float = 1.8) -> GroundTruth:
    xmin, ymin, xmax, ymax = world.extent
    geom = GridGeometry.covering(xmin, ymin, xmax, ymax, resolution)
    ground = np.full(geom.shape, UNKNOWN, dtype=np.int16)
    rows, cols = np.indices(geom.shape)
    centers = geom.cell_centers(cols.reshape(-1), rows.reshape(-1))
    flat_ground = ground.reshape(-1)

    for road in world.roads:
        line = Polyline(road.centerline)
        half = 0.5 * road.width
        s, lat, ok = line.project(centers, max_dist=half + 0.5)
        # exclude points beyond the ends of the centreline
        ok &= (s >= 0) & (s <= line.length)
        alat = np.abs(lat)
        drv = ok & (alat <= half)
        flat_ground[drv] = DRIVABLE_AREA.id
        hw = 0.5 * road.line_width
        mark = np.zeros_like(drv)
        if road.center_dash is not None:
            dash, gap = road.center_dash
            mark |= drv & (alat <= hw) & (np.mod(s, dash + gap) < dash)
        if road.edge_lines:
            mark |= drv & (np.abs(alat - (half - 0.25)) <= hw)
        for s0 in road.crosswalks:
            mark |= drv & (s >= s0) & (s <= s0 + 3.0) & (np.mod(lat + half, 1.0) < 0.5)
        for s0 in road.stop_lines:
            mark |= drv & (s >= s0) & (s <= s0 + 0.4) & (lat <= 0)
        flat_ground[mark] = ROAD_MARKING.id

    for pts, width in world.markings:
        line = Polyline(pts)
        s, lat, ok = line.project(centers, max_dist=width)
        ok &= (s >= 0) & (s <= line.length)
        flat_ground[ok & (np.abs(lat) <= 0.5 * width)] = ROAD_MARKING.id

    cls = ground.copy()
    inst = np.zeros(geom.shape, dtype=np.int64)
    registry: dict[int, Landmark] = {}
    for i, lm in enumerate(world.landmarks):
        lid = i + 1
        seg = lm.segment
        n = max(2, int(math.ceil(lm.width / 0.01)) + 1)
        samples = seg[0] + np.linspace(0.0, 1.0, n)[:, None] * (seg[1] - seg[0])
        col, row, inside = geom.cells_of(samples)
        cells = np.unique(np.stack([row[inside], col[inside]], axis=1), axis=0)
        cls[cells[:, 0], cells[:, 1]] = lm.class_id
        inst[cells[:, 0], cells[:, 1]] = lid
        c = lm.center.copy()
        c[2] -= lidar_height
        registry[lid] = Landmark(lid, lm.class_id, c, int(len(cells)))
    return GroundTruth(geom, ground, cls, inst, registry)


# ----------------------------------------------------------------------
# ray casting

_NO_HIT, _GROUND, _BOARD, _WALL = -1, 0, 1, 2


@dataclass
class _Surfaces:
    p0: np.ndarray  # (S, 2)
    p1: np.ndarray  # (S, 2)
    z0: np.ndarray
    z1: np.ndarray
    kind: np.ndarray  # _BOARD or _WALL
    index: np.ndarray  # landmark index for boards, -1 for walls

    def subset(self, mask: np.ndarray) -> "_Surfaces":
        return _Surfaces(self.p0[mask], self.p1[mask], self.z0[mask], self.z1[mask],
                         self.kind[mask], self.index[mask])


class _RayBundle:
    """Fixed ray directions in the vehicle frame, sorted by azimuth for culling."""

    def __init__(self, dirs: np.ndarray):
        self.dirs = np.asarray(dirs, dtype=float)
        az = np.arctan2(self.dirs[:, 1], self.dirs[:, 0])
        self.order = np.argsort(az, kind="stable")
        self.az = az[self.order]

    def _span(self, a0: float, a1: float) -> np.ndarray:
        lo, hi = min(a0, a1), max(a0, a1)
        if hi - lo <= math.pi:
            i, j = np.searchsorted(self.az, [lo, hi], side="left")
            return self.order[max(i - 1, 0):j + 1]
        i = np.searchsorted(self.az, lo, side="right")
        j = np.searchsorted(self.az, hi, side="left")
        return np.concatenate([self.order[:i + 1], self.order[max(j - 1, 0):]])

    def cast(self, origin: np.ndarray, yaw: float, surf: _Surfaces, max_range: float):
        """Nearest hit per ray from ``origin`` (world) with the bundle rotated by ``yaw``.

        Returns (t, kind, landmark index) in the bundle's ray order.
        """
        dirs = self.dirs
        n = len(dirs)
        t_best = np.full(n, np.inf)
        kind = np.full(n, _NO_HIT, dtype=np.int8)
        index = np.full(n, -1, dtype=np.int64)
        down = dirs[:, 2] < -1e-12
        tg = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
        hit = tg <= max_range
        t_best[hit] = tg[hit]
        kind[hit] = _GROUND
        if not len(surf.p0):
            return t_best, kind, index
        c, s = math.cos(yaw), math.sin(yaw)
        rt = np.array([[c, s], [-s, c]])  # world -> vehicle-aligned
        q0 = (surf.p0 - origin[None, :2]) @ rt.T
        q1 = (surf.p1 - origin[None, :2]) @ rt.T
        a0 = np.arctan2(q0[:, 1], q0[:, 0])
        a1 = np.arctan2(q1[:, 1], q1[:, 0])
        for k in range(len(q0)):
            idx = self._span(a0[k], a1[k])
            if not len(idx):
                continue
            d = dirs[idx]
            e = q1[k] - q0[k]
            w = q0[k]
            det = d[:, 1] * e[0] - d[:, 0] * e[1]
            safe = np.where(np.abs(det) > 1e-12, det, np.inf)
            t = (w[1] * e[0] - w[0] * e[1]) / safe
            sp = (d[:, 0] * w[1] - d[:, 1] * w[0]) / safe
            z = origin[2] + t * d[:, 2]
            ok = ((t > 1e-6) & (sp >= 0) & (sp <= 1) & (z >= surf.z0[k]) & (z <= surf.z1[k])
                  & (t <= max_range) & (t < t_best[idx]))
            sel = idx[ok]
            t_best[sel] = t[ok]
            kind[sel] = surf.kind[k]
            index[sel] = surf.index[k]
        return t_best, kind, index


# ----------------------------------------------------------------------
# rendering

@dataclass
class RenderedFrame:
    scan: np.ndarray  # (N, 3) vehicle frame
    frame: PerceptionFrame
    true_class: np.ndarray  # (H, W) ground-truth class per pixel
    true_instance: np.ndarray  # (H, W) landmark id per pixel (0 = none)
    instance_ids: dict[int, int]  # per-frame id -> landmark id
    patch: Optional[np.ndarray] = None  # (H, W) error-patch index per pixel, -1 where nothing was hit


class Renderer:
    def __init__(self, world: WorldSpec, sensors: SensorSpec, noise: NoiseSpec,
                 truth: Optional[GroundTruth] = None, num_classes: int = NUM_CLASSES):
        self.world = world
        self.sensors = sensors
        self.noise = noise
        self.k = num_classes
        self.truth = truth if truth is not None else rasterize_world(world, lidar_height=sensors.lidar_height)
        self.camera = sensors.camera()
        self._pixel_rays = _RayBundle(self.camera.pixel_rays().reshape(-1, 3))
        self._lidar_rays = _RayBundle(sensors.lidar_directions())
        self._table = _EvidenceTable(num_classes)
        self._surfaces = self._build_surfaces()
        self._build_fields()

    def _build_surfaces(self) -> _Surfaces:
        p0, p1, z0, z1, kind, index = [], [], [], [], [], []
        for i, lm in enumerate(self.world.landmarks):
            a, b = lm.segment
            p0.append(a); p1.append(b)
            z0.append(lm.z); z1.append(lm.z + lm.height)
            kind.append(_BOARD); index.append(i)
        for wall in self.world.walls:
            for a, b in zip(wall[:-1], wall[1:]):
                p0.append(a); p1.append(b)
                z0.append(0.0); z1.append(self.world.wall_height)
                kind.append(_WALL); index.append(-1)
        if not p0:
            z = np.zeros((0, 2))
            return _Surfaces(z, z, np.zeros(0), np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64))
        return _Surfaces(np.array(p0), np.array(p1), np.array(z0), np.array(z1),
                         np.array(kind, dtype=np.int8), np.array(index, dtype=np.int64))

    def _build_fields(self) -> None:
        """Per-patch latent accuracy, error draw and wrong label."""
        g = self.truth.geometry
        ps = self.noise.patch_size
        self._patch = ps
        nx = int(math.ceil(g.width * g.resolution / ps)) + 1
        ny = int(math.ceil(g.height * g.resolution / ps)) + 1
        rng = np.random.default_rng([self.world.seed, 0x5EED])
        self._acc_stuff = rng.beta(*self.noise.stuff_confidence, size=(ny, nx))
        self._acc_thing = rng.beta(*self.noise.thing_confidence, size=(ny, nx))
        self._err_draw = rng.random((ny, nx))
        self._wrong_draw = rng.random((ny, nx))
        # systematic confusions stay within the stuff or thing group
        thing = is_thing(np.arange(self.k))
        self._confusable = []
        for c in range(self.k):
            same = [j for j in range(self.k) if j != c and thing[j] == thing[c]]
            self._confusable.append(np.array(same or [j for j in range(self.k) if j != c]))

    def _patch_index(self, xy: np.ndarray):
        o = self.truth.geometry.origin
        ix = np.floor((xy[:, 0] - o.x) / self._patch).astype(np.int64)
        iy = np.floor((xy[:, 1] - o.y) / self._patch).astype(np.int64)
        ny, nx = self._err_draw.shape
        return np.clip(iy, 0, ny - 1), np.clip(ix, 0, nx - 1)

    def _ground_class(self, xy: np.ndarray) -> np.ndarray:
        col, row, inside = self.truth.geometry.cells_of(xy)
        out = np.full(len(xy), UNKNOWN, dtype=np.int64)
        out[inside] = self.truth.ground_class[row[inside], col[inside]]
        return out

    def _nearby(self, pose: Pose2D, reach: float) -> _Surfaces:
        s = self._surfaces
        if not len(s.p0):
            return s
        mid = 0.5 * (s.p0 + s.p1)
        rel = mid - np.array([pose.x, pose.y])
        half = 0.5 * np.linalg.norm(s.p1 - s.p0, axis=1)
        dist = np.linalg.norm(rel, axis=1)
        ahead = rel @ np.array([math.cos(pose.yaw), math.sin(pose.yaw)]) > -half - 1.0
        return s.subset((dist <= reach + half) & ahead)

    def render(self, pose: Pose2D, rng: np.random.Generator, timestamp: float = 0.0) -> RenderedFrame:
        sen, noise = self.sensors, self.noise
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        lidar_origin = np.array([pose.x, pose.y, sen.lidar_height])
        surf = self._nearby(pose, sen.max_range + 10.0)

        # camera
        cam_origin = lidar_origin + rot @ self.camera.center
        pdirs = self._pixel_rays.dirs @ rot.T
        t, kind, index = self._pixel_rays.cast(cam_origin, pose.yaw, surf, 200.0)
        hits = cam_origin[None, :] + np.where(np.isfinite(t), t, 0.0)[:, None] * pdirs
        h, w = sen.image_height, sen.image_width
        true_cls = np.full(h * w, UNKNOWN, dtype=np.int64)
        gmask = kind == _GROUND
        true_cls[gmask] = self._ground_class(hits[gmask, :2])
        bmask = kind == _BOARD
        lm_cls = np.array([lm.class_id for lm in self.world.landmarks], dtype=np.int64)
        true_cls[bmask] = lm_cls[index[bmask]]
        true_lm = np.where(bmask, index + 1, 0)

        iy, ix = self._patch_index(hits[:, :2])
        patch = np.where(true_cls >= 0, iy * self._err_draw.shape[1] + ix, -1)
        acc = np.where(bmask, self._acc_thing[iy, ix], self._acc_stuff[iy, ix])
        label = true_cls.copy()
        wrong = (self._err_draw[iy, ix] > acc) & (true_cls >= 0)
        draw = self._wrong_draw[iy, ix]
        for c in range(self.k):
            sel = wrong & (true_cls == c)
            if np.any(sel):
                opts = self._confusable[c]
                label[sel] = opts[(draw[sel] * len(opts)).astype(np.int64)]
        conf = emitted_confidence(acc, noise.miscalibration, noise.miscalibration_strength)

        if noise.label_flip_prob > 0:
            flip = (rng.random(h * w) < noise.label_flip_prob) & (label >= 0)
            label[flip] = (label[flip] + rng.integers(1, self.k, size=int(flip.sum()))) % self.k

        if noise.region_corruptions:
            vv, uu = np.divmod(np.arange(h * w), w)
            fu, fv = (uu + 0.5) / w, (vv + 0.5) / h
            for rc in noise.region_corruptions:
                u0, v0, u1, v1 = rc.box
                inbox = (fu >= u0) & (fu < u1) & (fv >= v0) & (fv < v1)
                if rc.shift is not None:
                    sel = inbox & gmask
                    off = rot[:2, :2] @ np.asarray(rc.shift, dtype=float)
                    shifted = self._ground_class(hits[sel, :2] + off[None, :])
                    apply = rng.random(int(sel.sum())) < rc.flip_prob
                    idx = np.flatnonzero(sel)[apply]
                    label[idx] = shifted[apply]
                    touched = idx
                else:
                    sel = inbox & (label >= 0)
                    apply = rng.random(int(sel.sum())) < rc.flip_prob
                    idx = np.flatnonzero(sel)[apply]
                    label[idx] = (true_cls[idx] + 1) % self.k
                    touched = idx
                if rc.confidence is not None:
                    conf[touched] = rc.confidence

        # per-frame instance ids on correctly classified landmark pixels
        visible = np.unique(true_lm[(true_lm > 0)])
        perm = rng.permutation(len(visible)) + 1
        to_frame = dict(zip(visible.tolist(), perm.tolist()))
        inst = np.zeros(h * w, dtype=np.int64)
        on = (true_lm > 0) & (label == true_cls)
        if np.any(on):
            inst[on] = [to_frame[v] for v in true_lm[on].tolist()]

        if noise.leak_fraction > 0 and np.any(inst > 0):
            img = inst.reshape(h, w)
            size = 2 * noise.leak_width + 1
            grown = ndimage.maximum_filter(img, size=size, mode="constant", cval=0)
            ring = (grown > 0) & (img == 0)
            leak = ring & (rng.random((h, w)) < noise.leak_fraction)
            leak_f = leak.reshape(-1)
            ids = grown.reshape(-1)[leak_f]
            back = {v: k for k, v in to_frame.items()}
            inst[leak_f] = ids
            label[leak_f] = [lm_cls[back[i] - 1] for i in ids.tolist()]
            conf[leak_f] = noise.leak_confidence

        inst[~is_thing(label) | (label < 0)] = 0
        alpha = self._table.alpha(label, conf, noise.temperature)
        s_tot = alpha.sum(axis=1)
        u = np.where(s_tot > 0, np.minimum(self.k / np.where(s_tot > 0, s_tot, 1.0), 1.0), 1.0)
        frame = PerceptionFrame(
            timestamp,
            alpha.reshape(h, w, self.k).astype(np.float32),
            u.reshape(h, w).astype(np.float32),
            inst.reshape(h, w).astype(np.uint32),
        )

        # LiDAR
        ldirs_v = self._lidar_rays.dirs
        t, kind, _ = self._lidar_rays.cast(lidar_origin, pose.yaw, surf, sen.max_range)
        hit = kind != _NO_HIT
        rngs = t[hit]
        if sen.range_noise > 0:
            rngs = rngs + rng.normal(scale=sen.range_noise, size=rngs.shape)
        scan = ldirs_v[hit] * rngs[:, None]
        scan = scan[np.linalg.norm(scan, axis=1) <= sen.max_range]
        return RenderedFrame(
            scan, frame, true_cls.reshape(h, w), true_lm.reshape(h, w),
            {v: k for k, v in to_frame.items()}, patch.reshape(h, w),
        )


def render_frame(world: WorldSpec, sensors: SensorSpec, pose: Pose2D, noise: NoiseSpec,
                 rng: np.random.Generator, renderer: Optional[Renderer] = None):
    """Render one (scan, frame) pair. Reuse ``renderer`` across calls for speed."""
    r = renderer if renderer is not None else Renderer(world, sensors, noise)
    out = r.render(pose, rng)
    return out.scan, out.frame


def simulate_odometry(velocities, factor: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise with sigma ``factor * |v|`` per component."""
    v = np.asarray(velocities, dtype=float)
    if factor == 0:
        return v.copy()
    return v + rng.normal(size=v.shape) * (factor * np.abs(v))


# ----------------------------------------------------------------------
# scenarios

@dataclass
class WorldConfig:
    pieces: list[tuple[float, float]] = field(
        default_factory=lambda: [(60.0, 0.0), (40.0, 1.0 / 40.0), (60.0, 0.0), (30.0, -1.0 / 30.0), (110.0, 0.0)]
    )
    road_width: float = 7.0
    center_dash: Optional[tuple[float, float]] = (3.0, 6.0)
    crosswalk_every: float = 70.0
    stop_line_every: float = 45.0
    num_landmarks: int = 20
    landmark_offset: tuple[float, float] = (1.0, 2.5)  # beyond the road edge
    wall_offset: float = 6.0  # beyond the road edge
    margin: float = 5.0

    def __post_init__(self):
        self.pieces = [tuple(p) for p in self.pieces]
        if self.center_dash is not None:
            self.center_dash = tuple(self.center_dash)
        self.landmark_offset = tuple(self.landmark_offset)


def build_world(cfg: WorldConfig, seed: int) -> WorldSpec:
    rng = np.random.default_rng([seed, 0xB0A2D])
    center = arc_polyline(cfg.pieces)
    line = Polyline(center)
    half = 0.5 * cfg.road_width
    length = line.length
    crosswalks = tuple(np.arange(cfg.crosswalk_every * 0.5, length - 10.0, cfg.crosswalk_every)) if cfg.crosswalk_every else ()
    stops = tuple(np.arange(cfg.stop_line_every * 0.7, length - 10.0, cfg.stop_line_every)) if cfg.stop_line_every else ()
    road = RoadSpec(center, cfg.road_width, cfg.center_dash, True, 0.15, crosswalks, stops)

    landmarks = []
    if cfg.num_landmarks:
        stations = np.linspace(25.0, length - 10.0, cfg.num_landmarks)
        stations += rng.uniform(-2.0, 2.0, size=len(stations))
        for i, st in enumerate(stations):
            p, heading = line.at(st)
            side = 1.0 if i % 2 == 0 else -1.0
            off = half + rng.uniform(*cfg.landmark_offset)
            nrm = np.array([-math.sin(heading), math.cos(heading)])
            xy = p + side * off * nrm
            if rng.random() < 0.5:
                cls, wdt, hgt, z = TRAFFIC_SIGN.id, 0.8, 0.8, rng.uniform(2.0, 2.6)
            else:
                cls, wdt, hgt, z = TRAFFIC_LIGHT.id, 0.4, 1.0, rng.uniform(3.0, 3.8)
            # billboard faces along the road
            landmarks.append(LandmarkSpec(cls, float(xy[0]), float(xy[1]), float(z), wdt, hgt, heading + math.pi))

    walls = []
    if cfg.wall_offset is not None:
        stations = np.arange(0.0, length + 1e-9, 4.0)
        if stations[-1] < length:
            stations = np.append(stations, length)
        for side in (1.0, -1.0):
            pts = []
            for st in stations:
                p, heading = line.at(st)
                nrm = np.array([-math.sin(heading), math.cos(heading)])
                pts.append(p + side * (half + cfg.wall_offset) * nrm)
            walls.append(np.array(pts))

    allpts = [center] + walls + [np.array([[lm.x, lm.y] for lm in landmarks]).reshape(-1, 2)]
    stack = np.vstack(allpts)
    lo = stack.min(axis=0) - cfg.margin - half
    hi = stack.max(axis=0) + cfg.margin + half
    extent = (float(np.floor(lo[0])), float(np.floor(lo[1])), float(np.ceil(hi[0])), float(np.ceil(hi[1])))
    return WorldSpec([road], landmarks, extent, walls=walls, seed=seed)


@dataclass
class TrajectoryConfig:
    speed: float = 5.0
    frames: int = 200
    start_station: float = 2.0
    lane_offset: float = -1.75  # right lane
    # sinusoidal drift within the lane, so heading rates are never exactly zero
    weave_amplitude: float = 0.3
    weave_wavelength: float = 40.0


@dataclass
class ScenarioConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sensors: SensorSpec = field(default_factory=SensorSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d or {})
        return cls(
            world=WorldConfig(**d.get("world", {})),
            sensors=_sensor_from_dict(d.get("sensors", {})),
            noise=NoiseSpec(**d.get("noise", {})),
            trajectory=TrajectoryConfig(**d.get("trajectory", {})),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        d = {
            "world": asdict(self.world),
            "sensors": asdict(self.sensors),
            "noise": asdict(self.noise),
            "trajectory": asdict(self.trajectory),
            "seed": self.seed,
        }
        d["noise"]["miscalibration"] = self.noise.miscalibration.value
        return _jsonable(d)


def _sensor_from_dict(d: dict) -> SensorSpec:
    d = dict(d)
    for key in ("camera_offset", "lidar_elevation_deg"):
        if key in d:
            d[key] = tuple(d[key])
    return SensorSpec(**d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Enum):
        return x.value
    return x


def trajectory_poses(world: WorldSpec, cfg: TrajectoryConfig, dt: float) -> np.ndarray:
    """Ground-truth poses (T, 3) driving along the first road."""
    line = Polyline(world.roads[0].centerline)
    end = cfg.start_station + cfg.speed * dt * (cfg.frames - 1)
    if cfg.start_station < 0 or end > line.length:
        raise InfeasibleTrajectoryError(
            f"trajectory needs stations up to {end:.1f} m but the road is {line.length:.1f} m long")
    xmin, ymin, xmax, ymax = world.extent

    def offset(st):
        if cfg.weave_amplitude == 0:
            return cfg.lane_offset
        return cfg.lane_offset + cfg.weave_amplitude * math.sin(2 * math.pi * st / cfg.weave_wavelength)

    def position(st):
        p, heading = line.at(st)
        nrm = np.array([-math.sin(heading), math.cos(heading)])
        return p + offset(st) * nrm

    poses = np.zeros((cfg.frames, 3))
    eps = 0.05
    for i in range(cfg.frames):
        st = cfg.start_station + cfg.speed * dt * i
        q = position(st)
        if not (xmin <= q[0] <= xmax and ymin <= q[1] <= ymax):
            raise InfeasibleTrajectoryError("trajectory leaves the world extent")
        a, b = position(max(st - eps, 0.0)), position(min(st + eps, line.length))
        poses[i] = (q[0], q[1], math.atan2(b[1] - a[1], b[0] - a[0]))
    return poses


def body_velocities(poses: np.ndarray, dt: float) -> np.ndarray:
    """Body-frame velocities (T-1, 3) that reproduce ``poses`` exactly under SE(2) motion."""
    out = np.zeros((max(len(poses) - 1, 0), 3))
    for i in range(len(poses) - 1):
        d = relative_pose(Pose2D(*poses[i]), Pose2D(*poses[i + 1]))
        out[i] = (d.x / dt, d.y / dt, d.yaw / dt)
    return out


def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xF4A3E, index])


@dataclass
class Scenario:
    """A generated scenario; frames are rendered lazily and deterministically."""

    config: ScenarioConfig
    world: WorldSpec
    truth: GroundTruth
    renderer: Renderer
    poses: np.ndarray
    velocities: np.ndarray
    dt: float

    @property
    def camera(self) -> CameraModel:
        return self.renderer.camera

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.poses)) * self.dt

    def __len__(self) -> int:
        return len(self.poses)

    def render(self, i: int) -> RenderedFrame:
        return self.renderer.render(Pose2D(*self.poses[i]), frame_rng(self.config.seed, i), float(i * self.dt))

    def frames(self) -> Iterator[RenderedFrame]:
        for i in range(len(self)):
            yield self.render(i)

    def truth_map(self) -> PanopticGridMap:
        return self.truth.to_map(self.renderer.k)


def generate_scenario(cfg: ScenarioConfig, trajectory=None) -> Scenario:
    """Build world, ground truth and trajectory. Deterministic in ``cfg.seed``.

    ``trajectory`` may be a callable ``(world, dt) -> (T, 3) poses`` replacing
    the default lane-following generator.
    """
    world = build_world(cfg.world, cfg.seed)
    truth = rasterize_world(world, lidar_height=cfg.sensors.lidar_height)
    renderer = Renderer(world, cfg.sensors, cfg.noise, truth)
    dt = 1.0 / cfg.sensors.frame_rate
    if trajectory is None:
        poses = trajectory_poses(world, cfg.trajectory, dt)
    else:
        poses = np.asarray(trajectory(world, dt), dtype=float)
        xmin, ymin, xmax, ymax = world.extent
        if np.any(poses[:, 0] < xmin) or np.any(poses[:, 0] > xmax) or np.any(poses[:, 1] < ymin) or np.any(poses[:, 1] > ymax):
            raise InfeasibleTrajectoryError("trajectory leaves the world extent")
    poses[:, 2] = wrap_angle(poses[:, 2])
    return Scenario(cfg, world, truth, renderer, poses, body_velocities(poses, dt), dt)
