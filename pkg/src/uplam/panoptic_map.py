"""Global BEV panoptic grid map with three aggregation strategies.

Per-cell state is held densely: an accumulator of shape (H, W, K) and a
measurement count (H, W). What the accumulator means depends on the strategy:

* ``evidential``: running sum of the measurement evidence. The aggregated
  cell evidence is ``sum / (N * K)`` and cell probabilities are its
  normalisation.
* ``latest_perception``: the evidence vector of the last point binned into
  the cell.
* ``log_odds_softmax``: running sum of per-class log-odds of each point's
  probability vector; probabilities are recovered with a softmax.

Instance votes are kept sparsely per cell.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .core import (
    NUM_CLASSES,
    UNKNOWN,
    GridGeometry,
    Pose2D,
    is_thing,
    transform_points,
)
from .evidential import normalized_entropy, softmax
from .ingest import AugmentedPoints

LOGIT_CLAMP = 1e-6


class AggregationStrategy(str, Enum):
    EVIDENTIAL = "evidential"
    LATEST_PERCEPTION = "latest_perception"
    LOG_ODDS_SOFTMAX = "log_odds_softmax"


class EmptyCellError(ValueError):
    """Probabilities or uncertainty requested for a cell without measurements."""


@dataclass
class Landmark:
    id: int
    class_id: int
    center: np.ndarray  # (3,) meters, map frame
    count: int  # filtered points accumulated into the centre


@dataclass
class MapCell:
    """Read-only snapshot of one cell."""

    accumulator: np.ndarray
    n: int
    votes: dict
    class_id: int
    uncertainty: float


class PanopticGridMap:
    def __init__(self, geometry: GridGeometry,
                 strategy: AggregationStrategy | str = AggregationStrategy.EVIDENTIAL,
                 num_classes: int = NUM_CLASSES):
        self.geometry = geometry
        self.strategy = AggregationStrategy(strategy)
        self.num_classes = int(num_classes)
        h, w = geometry.shape
        self.accumulator = np.zeros((h, w, self.num_classes), dtype=np.float64)
        self.count = np.zeros((h, w), dtype=np.int64)
        self.votes: dict[int, Counter] = defaultdict(Counter)
        self.landmarks: dict[int, Landmark] = {}
        self.next_instance_id = 1

    # ------------------------------------------------------------------
    # integration

    def integrate_points(self, points: AugmentedPoints, vehicle_pose: Pose2D) -> int:
        """Bin vehicle-frame points into the map; returns how many landed inside."""
        if len(points) == 0:
            return 0
        world = transform_points(points.position[:, :2], vehicle_pose)
        col, row, inside = self.geometry.cells_of(world)
        if not np.any(inside):
            return 0
        flat = (row[inside] * self.geometry.width + col[inside]).astype(np.int64)
        alpha = points.alpha[inside]
        inst = points.instance[inside]
        thing_vote = (inst > 0) & is_thing(np.argmax(alpha, axis=1))
        acc = self.accumulator.reshape(-1, self.num_classes)
        cnt = self.count.reshape(-1)

        if self.strategy is AggregationStrategy.EVIDENTIAL:
            np.add.at(acc, flat, alpha)
        elif self.strategy is AggregationStrategy.LOG_ODDS_SOFTMAX:
            p = np.clip(alpha / alpha.sum(axis=1, keepdims=True), LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
            np.add.at(acc, flat, np.log(p) - np.log1p(-p))
        else:
            last = _last_occurrence(flat)
            acc[flat[last]] = alpha[last]
            for c in self.votes.keys() & set(flat[last].tolist()):
                del self.votes[c]
            keep = last[thing_vote[last]]
            for c, i in zip(flat[keep].tolist(), inst[keep].tolist()):
                self.votes[c][i] = 1
        np.add.at(cnt, flat, 1)

        if self.strategy is not AggregationStrategy.LATEST_PERCEPTION and np.any(thing_vote):
            pairs, n = np.unique(np.stack([flat[thing_vote], inst[thing_vote]], axis=1),
                                 axis=0, return_counts=True)
            for (c, i), k in zip(pairs.tolist(), n.tolist()):
                self.votes[c][i] += k
        return int(inside.sum())

    # ------------------------------------------------------------------
    # per-cell queries

    def _flat(self, cell: tuple[int, int]) -> int:
        col, row = cell
        if not (0 <= col < self.geometry.width and 0 <= row < self.geometry.height):
            raise IndexError(f"cell {cell} outside the map")
        return row * self.geometry.width + col

    def cell_evidence(self, cell: tuple[int, int]) -> np.ndarray:
        """Aggregated evidence ``sum(alpha) / (N*K)`` of an evidential cell."""
        if self.strategy is not AggregationStrategy.EVIDENTIAL:
            raise ValueError("aggregated evidence is only defined for the evidential strategy")
        col, row = cell
        n = self.count[row, col]
        if n == 0:
            raise EmptyCellError(f"cell {cell} has no measurements")
        return self.accumulator[row, col] / (n * self.num_classes)

    def cell_probabilities(self, cell: tuple[int, int]) -> np.ndarray:
        col, row = cell
        self._flat(cell)
        if self.count[row, col] == 0:
            raise EmptyCellError(f"cell {cell} has no measurements")
        return self._probabilities(self.accumulator[row, col][None, :])[0]

    def cell_uncertainty(self, cell: tuple[int, int]) -> float:
        return float(normalized_entropy(self.cell_probabilities(cell)))

    def cell(self, cell: tuple[int, int]) -> MapCell:
        col, row = cell
        f = self._flat(cell)
        n = int(self.count[row, col])
        if n == 0:
            return MapCell(self.accumulator[row, col].copy(), 0, {}, UNKNOWN, float("nan"))
        p = self.cell_probabilities(cell)
        return MapCell(
            self.accumulator[row, col].copy(), n, dict(self.votes.get(f, {})),
            int(np.argmax(p)), float(normalized_entropy(p)),
        )

    def _probabilities(self, acc: np.ndarray) -> np.ndarray:
        if self.strategy is AggregationStrategy.LOG_ODDS_SOFTMAX:
            return softmax(acc, axis=-1)
        s = acc.sum(axis=-1, keepdims=True)
        return acc / np.where(s > 0, s, 1.0)

    # ------------------------------------------------------------------
    # rasters

    @property
    def observed(self) -> np.ndarray:
        return self.count > 0

    def probabilities(self) -> np.ndarray:
        """(H, W, K) cell probabilities; rows of unobserved cells are zero."""
        p = self._probabilities(self.accumulator)
        p[~self.observed] = 0.0
        return p

    def class_raster(self) -> np.ndarray:
        """Argmax class per cell (lowest id on ties), UNKNOWN where unobserved."""
        cls = np.argmax(self._probabilities(self.accumulator), axis=-1).astype(np.int16)
        cls[~self.observed] = UNKNOWN
        return cls

    def uncertainty_raster(self) -> np.ndarray:
        """Normalised-entropy uncertainty per cell, NaN where unobserved."""
        u = np.full(self.geometry.shape, np.nan)
        obs = self.observed
        u[obs] = normalized_entropy(self._probabilities(self.accumulator[obs]))
        return u

    def instance_raster(self, class_raster: Optional[np.ndarray] = None) -> np.ndarray:
        """Majority-vote instance id for thing cells (lowest id on ties), else 0."""
        cls = self.class_raster() if class_raster is None else class_raster
        out = np.zeros(self.geometry.shape, dtype=np.int64)
        flat_out = out.reshape(-1)
        flat_cls = cls.reshape(-1)
        for f, votes in self.votes.items():
            if not votes or not is_thing(flat_cls[f]):
                continue
            best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
            flat_out[f] = best[0]
        return out

    # ------------------------------------------------------------------

    def observed_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """(col, row) arrays of observed cells in row-major order."""
        row, col = np.nonzero(self.observed)
        return col, row

    def register_landmark(self, class_id: int, center, count: int) -> int:
        lid = self.next_instance_id
        self.next_instance_id += 1
        self.landmarks[lid] = Landmark(lid, int(class_id), np.asarray(center, dtype=float), int(count))
        return lid

    def set_labels(self, class_raster: np.ndarray, instance_raster: Optional[np.ndarray] = None) -> None:
        """Overwrite the map with hard labels (one-hot evidence, N = 1).

        Used for ground-truth maps; cells labelled UNKNOWN are left empty.
        """
        cls = np.asarray(class_raster)
        if cls.shape != self.geometry.shape:
            raise ValueError("label raster does not match the map geometry")
        self.accumulator[:] = 0.0
        self.count[:] = 0
        self.votes.clear()
        lab = cls != UNKNOWN
        rows, cols = np.nonzero(lab)
        k = cls[rows, cols].astype(np.int64)
        if self.strategy is AggregationStrategy.LOG_ODDS_SOFTMAX:
            p = np.full((len(k), self.num_classes), LOGIT_CLAMP)
            p[np.arange(len(k)), k] = 1.0 - LOGIT_CLAMP
            self.accumulator[rows, cols] = np.log(p) - np.log1p(-p)
        else:
            self.accumulator[rows, cols, k] = 1.0
        self.count[rows, cols] = 1
        if instance_raster is not None:
            inst = np.asarray(instance_raster)
            r, c = np.nonzero((inst > 0) & lab)
            for rr, cc in zip(r.tolist(), c.tolist()):
                self.votes[rr * self.geometry.width + cc][int(inst[rr, cc])] = 1


def _last_occurrence(flat: np.ndarray) -> np.ndarray:
    """Indices of the last occurrence of each distinct value, ascending by value."""
    rev = flat[::-1]
    _, first_in_rev = np.unique(rev, return_index=True)
    return len(flat) - 1 - first_in_rev


def weighted_probability_form(alpha: np.ndarray) -> np.ndarray:
    """Cell evidence as the uncertainty-weighted mean of measurement probabilities.

    ``alpha`` holds N measurements, shape (N, K). Computes
    ``1/N * sum_i p_i / u_i`` with ``p_i = alpha_i / S_i`` and ``u_i = K / S_i``
    (no clamping of ``u``).
    """
    alpha = np.asarray(alpha, dtype=float)
    k = alpha.shape[1]
    s = alpha.sum(axis=1, keepdims=True)
    p = alpha / s
    u = k / s
    return np.mean(p / u, axis=0)


def average_evidence_form(alpha: np.ndarray) -> np.ndarray:
    """Cell evidence as ``sum_i alpha_i / (N*K)``."""
    alpha = np.asarray(alpha, dtype=float)
    n, k = alpha.shape
    return alpha.sum(axis=0) / (n * k)
