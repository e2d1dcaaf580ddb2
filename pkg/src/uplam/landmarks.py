"""Landmark extraction: robust range filtering of instance points and
frame-to-frame association of instance centres."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import Pose2D, is_thing, transform_points
from .ingest import AugmentedPoints
from .panoptic_map import Landmark, PanopticGridMap

MAD_FACTOR = 1.5
MIN_INSTANCE_POINTS = 10
ASSOCIATION_RADIUS = 0.5


def mad_inlier_mask(values, factor: float = MAD_FACTOR) -> np.ndarray:
    """Keep values within ``factor`` median absolute deviations of the median.

    With a zero MAD only values equal to the median survive.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    med = np.median(v)
    dev = np.abs(v - med)
    mad = np.median(dev)
    return dev <= factor * mad


def filter_instance_points(points: AugmentedPoints, factor: float = MAD_FACTOR,
                           min_points: int = MIN_INSTANCE_POINTS) -> AugmentedPoints:
    """Drop range outliers of one instance; reject it entirely if too few remain."""
    keep = mad_inlier_mask(points.range, factor)
    if keep.sum() < min_points:
        return points[np.zeros(len(points), dtype=bool)]
    return points[keep]


@dataclass
class Detection:
    class_id: int
    center: np.ndarray
    count: int = 1


def associate_instances(detections: Sequence[Detection], registry: dict[int, Landmark],
                        next_id: int, radius: float = ASSOCIATION_RADIUS) -> tuple[list[int], int]:
    """Match detections to registered landmarks of the same class.

    Pairs are taken greedily by increasing distance, one-to-one, within
    ``radius``. Unmatched detections get fresh ids from ``next_id``. Returns
    the assigned ids and the updated counter. The registry is not modified.
    """
    ids = [0] * len(detections)
    if registry and detections:
        reg = list(registry.values())
        centers = np.array([lm.center for lm in reg])
        classes = np.array([lm.class_id for lm in reg])
        pairs = []
        for di, det in enumerate(detections):
            d = np.linalg.norm(centers - det.center, axis=1)
            ok = (classes == det.class_id) & (d <= radius)
            pairs.extend((float(d[j]), di, reg[j].id) for j in np.flatnonzero(ok))
        used = set()
        for _, di, lid in sorted(pairs):
            if ids[di] == 0 and lid not in used:
                ids[di] = lid
                used.add(lid)
    for di in range(len(ids)):
        if ids[di] == 0:
            ids[di] = next_id
            next_id += 1
    return ids, next_id


def update_registry(registry: dict[int, Landmark], ids: Iterable[int],
                    detections: Sequence[Detection]) -> None:
    """Fold detections into the registry; centres are point-weighted running means."""
    for lid, det in zip(ids, detections):
        lm = registry.get(lid)
        if lm is None:
            registry[lid] = Landmark(lid, det.class_id, np.asarray(det.center, dtype=float).copy(), det.count)
        else:
            total = lm.count + det.count
            lm.center = (lm.center * lm.count + det.center * det.count) / total
            lm.count = total


def extract_instances(points: AugmentedPoints, pose: Pose2D = Pose2D(0.0, 0.0, 0.0)):
    """Filter each instance of a frame.

    Returns ``(kept_points, detections, frame_ids)`` where ``kept_points`` has
    range outliers removed and the instance id cleared on rejected instances,
    and ``detections[i]`` (map-frame centre) belongs to per-frame id
    ``frame_ids[i]``.
    """
    cls = points.argmax_class()
    inst = points.instance.copy()
    inst[~is_thing(cls)] = 0
    keep = np.ones(len(points), dtype=bool)
    detections, frame_ids = [], []
    for fid in np.unique(inst[inst > 0]).tolist():
        sel = np.flatnonzero(inst == fid)
        # an instance carries the class most of its points vote for
        c = int(np.bincount(cls[sel]).argmax())
        sel_c = sel[cls[sel] == c]
        inst[sel[cls[sel] != c]] = 0
        inlier = mad_inlier_mask(points.range[sel_c])
        keep[sel_c[~inlier]] = False
        survivors = sel_c[inlier]
        if len(survivors) < MIN_INSTANCE_POINTS:
            inst[survivors] = 0
            continue
        world = transform_points(points.position[survivors], pose)
        detections.append(Detection(c, world.mean(axis=0), len(survivors)))
        frame_ids.append(fid)
    out = points[keep]
    out.instance = inst[keep]
    return out, detections, frame_ids


class MapBuilder:
    """Frame-by-frame global map construction with landmark tracking."""

    def __init__(self, grid_map: PanopticGridMap, track_landmarks: bool = True):
        self.map = grid_map
        self.track_landmarks = track_landmarks

    def add_frame(self, points: AugmentedPoints, pose: Pose2D) -> list[int]:
        """Integrate one frame; returns the global ids seen in it."""
        if not self.track_landmarks:
            self.map.integrate_points(points, pose)
            return []
        kept, detections, frame_ids = extract_instances(points, pose)
        ids, self.map.next_instance_id = associate_instances(
            detections, self.map.landmarks, self.map.next_instance_id)
        update_registry(self.map.landmarks, ids, detections)
        remap = dict(zip(frame_ids, ids))
        nz = np.flatnonzero(kept.instance > 0)
        kept.instance[nz] = [remap.get(i, 0) for i in kept.instance[nz].tolist()]
        self.map.integrate_points(kept, pose)
        return ids
