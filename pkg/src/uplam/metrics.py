"""Map and trajectory scoring: IoU, panoptic quality, calibration and pose errors.

All map metrics are evaluated over cells that are labelled in both the
predicted and the ground-truth map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import NUM_CLASSES, THING_IDS, UNKNOWN, wrap_angle
from .panoptic_map import Landmark, PanopticGridMap

MATCH_IOU = 0.5
LANDMARK_MATCH_RADIUS = 1.0
ECE_BINS = 10


class GeometryMismatchError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


# ----------------------------------------------------------------------
# semantic IoU

def class_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Per-class IoU over cells labelled in both rasters; NaN for classes absent from both."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    valid = (pred != UNKNOWN) & (truth != UNKNOWN)
    p, t = pred[valid], truth[valid]
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        pk, tk = p == k, t == k
        union = np.count_nonzero(pk | tk)
        if union:
            out[k] = np.count_nonzero(pk & tk) / union
    return out


def mean_iou(ious: np.ndarray) -> float:
    v = np.asarray(ious, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else 0.0


# ----------------------------------------------------------------------
# instances and panoptic quality

@dataclass
class InstanceMatch:
    pred_id: int
    truth_id: int
    class_id: int
    iou: float


def _segments(cls: np.ndarray, inst: np.ndarray, valid: np.ndarray, class_id: int) -> dict[int, np.ndarray]:
    sel = valid & (cls == class_id) & (inst > 0)
    ids = inst[sel]
    flat = np.flatnonzero(sel)
    return {int(i): flat[ids == i] for i in np.unique(ids)}


def match_instances(pred_cls, pred_inst, truth_cls, truth_inst, class_id: int,
                    threshold: float = MATCH_IOU) -> tuple[list[InstanceMatch], list[int], list[int]]:
    """Match same-class segments with IoU above ``threshold``.

    Returns ``(matches, unmatched_pred_ids, unmatched_truth_ids)``. With a
    threshold of 0.5 matches are unique, so no assignment step is needed.
    """
    pred_cls, truth_cls = np.asarray(pred_cls), np.asarray(truth_cls)
    valid = ((pred_cls != UNKNOWN) & (truth_cls != UNKNOWN)).reshape(-1)
    ps = _segments(pred_cls.reshape(-1), np.asarray(pred_inst).reshape(-1), valid, class_id)
    ts = _segments(truth_cls.reshape(-1), np.asarray(truth_inst).reshape(-1), valid, class_id)
    matches = []
    used_t = set()
    for pid, pc in ps.items():
        best = None
        for tid, tc in ts.items():
            if tid in used_t:
                continue
            inter = np.intersect1d(pc, tc, assume_unique=True).size
            if inter == 0:
                continue
            iou = inter / (pc.size + tc.size - inter)
            if iou > threshold and (best is None or iou > best[1]):
                best = (tid, iou)
        if best is not None:
            used_t.add(best[0])
            matches.append(InstanceMatch(pid, best[0], class_id, float(best[1])))
    matched_p = {m.pred_id for m in matches}
    return (matches, sorted(set(ps) - matched_p), sorted(set(ts) - used_t))


@dataclass
class PanopticScore:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


def panoptic_quality(pred_cls, pred_inst, truth_cls, truth_inst, class_id: int) -> Optional[PanopticScore]:
    """PQ/SQ/RQ of one thing class; None when neither map has a segment of it."""
    matches, fp, fn = match_instances(pred_cls, pred_inst, truth_cls, truth_inst, class_id)
    tp = len(matches)
    if tp + len(fp) + len(fn) == 0:
        return None
    iou_sum = sum(m.iou for m in matches)
    denom = tp + 0.5 * len(fp) + 0.5 * len(fn)
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return PanopticScore(iou_sum / denom, sq, rq, tp, len(fp), len(fn))


# ----------------------------------------------------------------------
# calibration

@dataclass
class CalibrationBin:
    lower: float
    upper: float
    confidence: float  # mean confidence of members, NaN if empty
    accuracy: float  # NaN if empty
    support: int

    @property
    def empty(self) -> bool:
        return self.support == 0


def calibration_bins(confidence, correct, bins: int = ECE_BINS) -> list[CalibrationBin]:
    if bins < 2:
        raise ValueError("need at least two bins")
    conf = np.clip(np.asarray(confidence, dtype=float).reshape(-1), 0.0, 1.0)
    ok = np.asarray(correct, dtype=float).reshape(-1)
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    out = []
    for b in range(bins):
        m = idx == b
        n = int(m.sum())
        out.append(CalibrationBin(
            b / bins, (b + 1) / bins,
            float(conf[m].mean()) if n else float("nan"),
            float(ok[m].mean()) if n else float("nan"),
            n,
        ))
    return out


def expected_calibration_error(confidence, correct, bins: int = ECE_BINS) -> float:
    """Support-weighted mean of |accuracy - confidence| over equal-width bins."""
    table = calibration_bins(confidence, correct, bins)
    total = sum(b.support for b in table)
    if total == 0:
        return 0.0
    return float(sum(b.support * abs(b.accuracy - b.confidence) for b in table if b.support) / total)


def _map_confidence(pred: PanopticGridMap, truth: PanopticGridMap):
    pc = pred.class_raster()
    tc = truth.class_raster()
    valid = (pc != UNKNOWN) & (tc != UNKNOWN)
    u = pred.uncertainty_raster()
    return 1.0 - u[valid], (pc[valid] == tc[valid])


def calibration_curve(pred: PanopticGridMap, truth: PanopticGridMap, bins: int = ECE_BINS) -> list[CalibrationBin]:
    _check_geometry(pred, truth)
    return calibration_bins(*_map_confidence(pred, truth), bins)


def map_uece(pred: PanopticGridMap, truth: PanopticGridMap, bins: int = ECE_BINS) -> float:
    _check_geometry(pred, truth)
    return expected_calibration_error(*_map_confidence(pred, truth), bins)


# ----------------------------------------------------------------------
# landmarks

@dataclass
class LandmarkMatch:
    pred_id: int
    truth_id: int
    distance: float


def match_landmarks(pred: dict[int, Landmark], truth: dict[int, Landmark],
                    radius: float = LANDMARK_MATCH_RADIUS) -> list[LandmarkMatch]:
    """Minimum-total-distance one-to-one matching of same-class landmarks within ``radius``."""
    out = []
    classes = {lm.class_id for lm in truth.values()} | {lm.class_id for lm in pred.values()}
    for c in sorted(classes):
        p = [lm for lm in sorted(pred.values(), key=lambda l: l.id) if lm.class_id == c]
        t = [lm for lm in sorted(truth.values(), key=lambda l: l.id) if lm.class_id == c]
        if not p or not t:
            continue
        d = np.linalg.norm(np.array([l.center for l in p])[:, None] - np.array([l.center for l in t])[None], axis=2)
        cost = np.where(d <= radius, d, 1e6)
        ri, ci = linear_sum_assignment(cost)
        for i, j in zip(ri, ci):
            if d[i, j] <= radius:
                out.append(LandmarkMatch(p[i].id, t[j].id, float(d[i, j])))
    return sorted(out, key=lambda m: m.truth_id)


# ----------------------------------------------------------------------
# map score

@dataclass
class MapScore:
    iou: list[float]
    miou: float
    pq: dict[int, Optional[float]]
    sq: dict[int, Optional[float]]
    rq: dict[int, Optional[float]]
    uece: float
    landmark_rmse: float
    landmark_mae: float
    landmarks_matched: int
    landmarks_predicted: int
    landmarks_truth: int
    cells_evaluated: int

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float) and math.isnan(x):
                return None
            return x
        return {
            "iou": [clean(v) for v in self.iou],
            "miou": self.miou,
            "pq": {str(k): v for k, v in self.pq.items()},
            "sq": {str(k): v for k, v in self.sq.items()},
            "rq": {str(k): v for k, v in self.rq.items()},
            "uece": self.uece,
            "landmark_rmse": clean(self.landmark_rmse),
            "landmark_mae": clean(self.landmark_mae),
            "landmarks_matched": self.landmarks_matched,
            "landmarks_predicted": self.landmarks_predicted,
            "landmarks_truth": self.landmarks_truth,
            "cells_evaluated": self.cells_evaluated,
        }


def _check_geometry(a: PanopticGridMap, b: PanopticGridMap) -> None:
    if not a.geometry.same_as(b.geometry):
        raise GeometryMismatchError("maps have different geometries")


def score_map(pred: PanopticGridMap, truth: PanopticGridMap,
              thing_ids: Sequence[int] = THING_IDS) -> MapScore:
    _check_geometry(pred, truth)
    pc, tc = pred.class_raster(), truth.class_raster()
    pi, ti = pred.instance_raster(pc), truth.instance_raster(tc)
    k = max(pred.num_classes, truth.num_classes)
    ious = class_iou(pc, tc, k)
    pq, sq, rq = {}, {}, {}
    for c in thing_ids:
        s = panoptic_quality(pc, pi, tc, ti, c)
        pq[c] = None if s is None else s.pq
        sq[c] = None if s is None else s.sq
        rq[c] = None if s is None else s.rq
    matches = match_landmarks(pred.landmarks, truth.landmarks)
    d = np.array([m.distance for m in matches])
    return MapScore(
        iou=[float(v) for v in ious],
        miou=mean_iou(ious),
        pq=pq, sq=sq, rq=rq,
        uece=map_uece(pred, truth),
        landmark_rmse=float(np.sqrt(np.mean(d ** 2))) if d.size else float("nan"),
        landmark_mae=float(np.mean(d)) if d.size else float("nan"),
        landmarks_matched=len(matches),
        landmarks_predicted=len(pred.landmarks),
        landmarks_truth=len(truth.landmarks),
        cells_evaluated=int(np.count_nonzero((pc != UNKNOWN) & (tc != UNKNOWN))),
    )


# ----------------------------------------------------------------------
# trajectories

@dataclass
class LocScore:
    trans_mae: float
    trans_rmse: float
    lat_mae: float
    lat_rmse: float
    lon_mae: float
    lon_rmse: float
    yaw_mae: float  # degrees
    yaw_rmse: float
    lateral: np.ndarray = field(repr=False)  # signed per-step series, left positive
    longitudinal: np.ndarray = field(repr=False)
    yaw: np.ndarray = field(repr=False)  # degrees

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in (
            "trans_mae", "trans_rmse", "lat_mae", "lat_rmse", "lon_mae", "lon_rmse", "yaw_mae", "yaw_rmse")}


def score_trajectory(estimated, truth) -> LocScore:
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = np.asarray(truth, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise LengthMismatchError(f"{len(est)} estimated poses vs {len(gt)} ground-truth poses")
    d = est[:, :2] - gt[:, :2]
    c, s = np.cos(gt[:, 2]), np.sin(gt[:, 2])
    lon = c * d[:, 0] + s * d[:, 1]
    lat = -s * d[:, 0] + c * d[:, 1]
    trans = np.hypot(d[:, 0], d[:, 1])
    yaw = np.degrees(wrap_angle(est[:, 2] - gt[:, 2]))

    def mae(x):
        return float(np.mean(np.abs(x))) if len(x) else 0.0

    def rmse(x):
        return float(np.sqrt(np.mean(x ** 2))) if len(x) else 0.0

    return LocScore(mae(trans), rmse(trans), mae(lat), rmse(lat), mae(lon), rmse(lon),
                    mae(yaw), rmse(yaw), lat, lon, yaw)
