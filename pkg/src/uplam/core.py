"""Shared domain types: class taxonomy, planar poses and grid geometry.

Grid convention: cell ``(col, row)`` covers the world rectangle
``origin + [col*res, (col+1)*res) x [row*res, (row+1)*res)`` expressed in the
grid frame, i.e. x maps to the column and y to the row. Dense rasters are
stored row-major with shape ``(height, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

UNKNOWN = -1


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    is_thing: bool = False


DRIVABLE_AREA = SemanticClass(0, "drivable_area")
ROAD_MARKING = SemanticClass(1, "road_marking")
TRAFFIC_SIGN = SemanticClass(2, "traffic_sign", is_thing=True)
TRAFFIC_LIGHT = SemanticClass(3, "traffic_light", is_thing=True)
UNKNOWN_CLASS = SemanticClass(UNKNOWN, "unknown")

DEFAULT_CLASSES: tuple[SemanticClass, ...] = (
    DRIVABLE_AREA,
    ROAD_MARKING,
    TRAFFIC_SIGN,
    TRAFFIC_LIGHT,
)
NUM_CLASSES = len(DEFAULT_CLASSES)
THING_IDS = tuple(c.id for c in DEFAULT_CLASSES if c.is_thing)
STUFF_IDS = tuple(c.id for c in DEFAULT_CLASSES if not c.is_thing)


def class_by_name(name: str) -> SemanticClass:
    for c in DEFAULT_CLASSES + (UNKNOWN_CLASS,):
        if c.name == name:
            return c
    raise KeyError(name)


def class_name(class_id: int) -> str:
    if class_id == UNKNOWN:
        return UNKNOWN_CLASS.name
    return DEFAULT_CLASSES[class_id].name


def is_thing(class_id) -> np.ndarray:
    """Vectorised thing-class test; works on scalars and arrays."""
    return np.isin(class_id, THING_IDS)


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


class Pose2D(NamedTuple):
    x: float
    y: float
    yaw: float

    @classmethod
    def make(cls, x: float, y: float, yaw: float) -> "Pose2D":
        return cls(float(x), float(y), wrap_angle(yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


def transform_pose(local: Pose2D, frame: Pose2D) -> Pose2D:
    """Express ``local`` (given in ``frame``) in the parent frame of ``frame``."""
    c, s = math.cos(frame.yaw), math.sin(frame.yaw)
    return Pose2D.make(
        frame.x + c * local.x - s * local.y,
        frame.y + s * local.x + c * local.y,
        frame.yaw + local.yaw,
    )


def inverse_pose(p: Pose2D) -> Pose2D:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2D.make(-c * p.x - s * p.y, s * p.x - c * p.y, -p.yaw)


def relative_pose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return transform_pose(b, inverse_pose(a))


def transform_points(xy: np.ndarray, frame: Pose2D) -> np.ndarray:
    """Apply the SE(2) transform ``frame`` to an (N, 2+) array of points.

    Extra columns (e.g. z) are passed through unchanged.
    """
    xy = np.asarray(xy, dtype=float)
    out = xy.copy()
    c, s = math.cos(frame.yaw), math.sin(frame.yaw)
    out[:, 0] = frame.x + c * xy[:, 0] - s * xy[:, 1]
    out[:, 1] = frame.y + s * xy[:, 0] + c * xy[:, 1]
    return out


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    resolution: float = 0.10
    origin: Pose2D = Pose2D(0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            resolution=float(d["resolution"]),
            origin=Pose2D.make(*d["origin"]),
        )

    @classmethod
    def covering(cls, xmin: float, ymin: float, xmax: float, ymax: float,
                 resolution: float = 0.10) -> "GridGeometry":
        """Axis-aligned grid covering the given world rectangle."""
        w = max(1, int(math.ceil((xmax - xmin) / resolution)))
        h = max(1, int(math.ceil((ymax - ymin) / resolution)))
        return cls(w, h, resolution, Pose2D(float(xmin), float(ymin), 0.0))

    def cells_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised world->cell mapping.

        Returns ``(col, row, inside)``; col/row are only meaningful where
        ``inside`` is true.
        """
        xy = np.asarray(xy, dtype=float)
        o = self.origin
        dx = xy[:, 0] - o.x
        dy = xy[:, 1] - o.y
        if o.yaw != 0.0:
            c, s = math.cos(o.yaw), math.sin(o.yaw)
            dx, dy = c * dx + s * dy, -s * dx + c * dy
        col = np.floor(dx / self.resolution).astype(np.int64)
        row = np.floor(dy / self.resolution).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return col, row, inside

    def cell_centers(self, col: np.ndarray, row: np.ndarray) -> np.ndarray:
        """World coordinates of the centres of the given cells, shape (N, 2)."""
        lx = (np.asarray(col, dtype=float) + 0.5) * self.resolution
        ly = (np.asarray(row, dtype=float) + 0.5) * self.resolution
        return transform_points(np.stack([lx, ly], axis=1), self.origin)

    def same_as(self, other: "GridGeometry") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and math.isclose(self.resolution, other.resolution, rel_tol=0, abs_tol=1e-12)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )


def world_to_cell(p: Sequence[float], g: GridGeometry) -> Optional[tuple[int, int]]:
    """Cell ``(col, row)`` containing world point ``p`` or None when outside."""
    col, row, inside = g.cells_of(np.asarray([p[:2]], dtype=float))
    if not inside[0]:
        return None
    return int(col[0]), int(row[0])


def world_of(cell: tuple[int, int], g: GridGeometry) -> tuple[float, float]:
    """World position of the lower-left corner of a cell."""
    lx, ly = cell[0] * g.resolution, cell[1] * g.resolution
    p = transform_points(np.array([[lx, ly]]), g.origin)[0]
    return float(p[0]), float(p[1])
