"""Camera/LiDAR association and the on-disk frame, scan and calibration formats.

``.evf`` evidential frame (little-endian)::

    header  : magic b"UEVF", uint32 version, uint32 width, uint32 height, uint32 K
    body    : width*height records in row-major order (v outer, u inner), each
              float32 alpha[K], float32 u, uint32 instance_id

A JSON sidecar (same stem, ``.json``) carries the timestamp and the name of
the calibration file. Pixels without any prediction carry all-zero evidence
and are ignored during association.

Pixel coordinates put pixel centres on integers, so the image rectangle is
``[-0.5, width - 0.5) x [-0.5, height - 0.5)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import NUM_CLASSES, is_thing

EVF_MAGIC = b"UEVF"
EVF_VERSION = 1
_EVF_HEADER = struct.Struct("<4sIIII")

DEFAULT_MAX_RANGE = 40.0


class CalibrationError(ValueError):
    """Missing or invalid camera calibration."""


class FrameFormatError(ValueError):
    """Malformed frame or scan file."""


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # 3x3 pixel-space matrix
    rotation: np.ndarray  # 3x3, LiDAR -> camera
    translation: np.ndarray  # (3,), LiDAR -> camera, meters
    width: int
    height: int

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, rotation=None, translation=None):
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        cam = cls(k, r, t, int(width), int(height))
        cam.validate()
        return cam

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    def validate(self) -> None:
        k = np.asarray(self.intrinsics, dtype=float)
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if k.shape != (3, 3) or r.shape != (3, 3) or t.shape != (3,):
            raise CalibrationError("intrinsics and rotation must be 3x3, translation length 3")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise CalibrationError("calibration contains non-finite values")
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise CalibrationError("focal lengths must be positive")
        if not np.allclose(r @ r.T, np.eye(3), rtol=0, atol=1e-9) or np.linalg.det(r) < 0:
            raise CalibrationError("extrinsic rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise CalibrationError("image size must be positive")

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) LiDAR-frame points; returns ``(uv, valid)``."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        pc = pts @ self.rotation.T + self.translation
        z = pc[:, 2]
        valid = z > 0
        uv = np.full((len(pts), 2), np.nan)
        if np.any(valid):
            hom = pc[valid] @ self.intrinsics.T
            with np.errstate(over="ignore", invalid="ignore"):
                uv[valid] = hom[:, :2] / hom[:, 2:3]
            u, v = uv[valid, 0], uv[valid, 1]
            inside = (np.isfinite(u) & np.isfinite(v)
                      & (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5))
            idx = np.flatnonzero(valid)
            valid[idx[~inside]] = False
        return uv, valid

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in the LiDAR frame for every pixel, (H, W, 3)."""
        vs, us = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        d = d_cam @ self.rotation  # R^T applied to row vectors
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the LiDAR frame."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "intrinsics": np.asarray(self.intrinsics).tolist(),
            "extrinsics": {
                "rotation": np.asarray(self.rotation).tolist(),
                "translation": np.asarray(self.translation).tolist(),
            },
            "image_size": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            cam = cls(
                np.asarray(d["intrinsics"], dtype=float),
                np.asarray(d["extrinsics"]["rotation"], dtype=float),
                np.asarray(d["extrinsics"]["translation"], dtype=float),
                int(d["image_size"][0]),
                int(d["image_size"][1]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise CalibrationError(f"incomplete calibration: {exc}") from exc
        cam.validate()
        return cam


def project_point(p: Sequence[float], cam: CameraModel) -> Optional[tuple[float, float]]:
    """Pixel coordinate of one LiDAR point, or None if behind or off-image."""
    uv, valid = cam.project(np.asarray(p, dtype=float).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


@dataclass
class PerceptionFrame:
    timestamp: float
    alpha: np.ndarray  # (H, W, K) float32
    uncertainty: np.ndarray  # (H, W) float32
    instance: np.ndarray  # (H, W) uint32

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        self.uncertainty = np.asarray(self.uncertainty, dtype=np.float32)
        self.instance = np.asarray(self.instance, dtype=np.uint32)
        h, w, _ = self.alpha.shape
        if self.uncertainty.shape != (h, w) or self.instance.shape != (h, w):
            raise FrameFormatError("frame planes disagree in shape")

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[2]

    def labeled(self) -> np.ndarray:
        """Mask of pixels that carry a prediction."""
        return self.alpha.sum(axis=-1) > 0

    def argmax_class(self) -> np.ndarray:
        cls = np.argmax(self.alpha, axis=-1).astype(np.int16)
        cls[~self.labeled()] = -1
        return cls

    def check_instances(self) -> bool:
        """Instance ids may only sit on thing-class pixels."""
        has = self.instance > 0
        return bool(np.all(is_thing(self.argmax_class()[has])))


@dataclass
class AugmentedPoint:
    position: np.ndarray
    alpha: np.ndarray
    u: float
    instance: int
    range: float


@dataclass
class AugmentedPoints:
    """Struct-of-arrays batch of augmented LiDAR points (vehicle frame)."""

    position: np.ndarray  # (N, 3)
    alpha: np.ndarray  # (N, K)
    u: np.ndarray  # (N,)
    instance: np.ndarray  # (N,) int64
    range: np.ndarray = field(default=None)  # (N,)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(-1, 3)
        alpha = np.asarray(self.alpha, dtype=float)
        k = alpha.shape[-1] if alpha.ndim == 2 else (alpha.size // max(len(self.position), 1))
        self.alpha = alpha.reshape(len(self.position), k)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        if self.range is None:
            self.range = np.linalg.norm(self.position, axis=1)
        else:
            self.range = np.asarray(self.range, dtype=float).reshape(-1)

    @classmethod
    def empty(cls, k: int = NUM_CLASSES) -> "AugmentedPoints":
        return cls(np.zeros((0, 3)), np.zeros((0, k)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_points(cls, points: Sequence[AugmentedPoint]) -> "AugmentedPoints":
        if not points:
            return cls.empty()
        return cls(
            np.array([p.position for p in points]),
            np.array([p.alpha for p in points]),
            np.array([p.u for p in points]),
            np.array([p.instance for p in points]),
            np.array([p.range for p in points]),
        )

    def __len__(self) -> int:
        return len(self.position)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return AugmentedPoint(
                self.position[i].copy(), self.alpha[i].copy(), float(self.u[i]),
                int(self.instance[i]), float(self.range[i]),
            )
        return AugmentedPoints(
            self.position[i], self.alpha[i], self.u[i], self.instance[i], self.range[i]
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]

    def argmax_class(self) -> np.ndarray:
        return np.argmax(self.alpha, axis=1)

    @staticmethod
    def concatenate(batches: Sequence["AugmentedPoints"]) -> "AugmentedPoints":
        batches = [b for b in batches if len(b)]
        if not batches:
            return AugmentedPoints.empty()
        return AugmentedPoints(
            np.concatenate([b.position for b in batches]),
            np.concatenate([b.alpha for b in batches]),
            np.concatenate([b.u for b in batches]),
            np.concatenate([b.instance for b in batches]),
            np.concatenate([b.range for b in batches]),
        )


def augment_scan(scan, frame: PerceptionFrame, cam: Optional[CameraModel],
                 max_range: float = DEFAULT_MAX_RANGE) -> AugmentedPoints:
    """Attach each in-image, in-range LiDAR point to its nearest pixel's vector.

    Points at exactly ``max_range`` are kept; pixels without a prediction
    contribute no point.
    """
    if cam is None:
        raise CalibrationError("camera calibration is missing")
    cam.validate()
    if (cam.width, cam.height) != (frame.width, frame.height):
        raise CalibrationError("calibration image size does not match the frame")
    pts = np.asarray(scan, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return AugmentedPoints.empty(frame.num_classes)
    rng = np.linalg.norm(pts, axis=1)
    keep = rng <= max_range
    uv, valid = cam.project(pts)
    keep &= valid
    idx = np.flatnonzero(keep)
    # nearest pixel, halves round up
    cols = np.clip(np.floor(uv[idx, 0] + 0.5).astype(np.int64), 0, frame.width - 1)
    rows = np.clip(np.floor(uv[idx, 1] + 0.5).astype(np.int64), 0, frame.height - 1)
    alpha = frame.alpha[rows, cols].astype(float)
    has_pred = alpha.sum(axis=1) > 0
    idx, rows, cols, alpha = idx[has_pred], rows[has_pred], cols[has_pred], alpha[has_pred]
    return AugmentedPoints(
        pts[idx],
        alpha,
        frame.uncertainty[rows, cols].astype(float),
        frame.instance[rows, cols].astype(np.int64),
        rng[idx],
    )


# --------------------------------------------------------------------------
# file formats

def write_evf(path, frame: PerceptionFrame, calibration: str = "calibration.json") -> None:
    path = Path(path)
    h, w, k = frame.alpha.shape
    rec = np.zeros((h, w), dtype=_evf_dtype(k))
    rec["alpha"] = frame.alpha
    rec["u"] = frame.uncertainty
    rec["l"] = frame.instance
    with open(path, "wb") as f:
        f.write(_EVF_HEADER.pack(EVF_MAGIC, EVF_VERSION, w, h, k))
        f.write(rec.tobytes(order="C"))
    sidecar = {"timestamp": float(frame.timestamp), "calibration": calibration, "frame": path.name}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _evf_dtype(k: int) -> np.dtype:
    return np.dtype([("alpha", "<f4", (k,)), ("u", "<f4"), ("l", "<u4")])


def read_evf(path) -> PerceptionFrame:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _EVF_HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, version, w, h, k = _EVF_HEADER.unpack_from(raw)
    if magic != EVF_MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    if version != EVF_VERSION:
        raise FrameFormatError(f"{path}: unsupported version {version}")
    dt = _evf_dtype(k)
    body = raw[_EVF_HEADER.size :]
    if len(body) != w * h * dt.itemsize:
        raise FrameFormatError(f"{path}: body size does not match header")
    rec = np.frombuffer(body, dtype=dt).reshape(h, w)
    ts = 0.0
    side = path.with_suffix(".json")
    if side.exists():
        ts = float(json.loads(side.read_text())["timestamp"])
    return PerceptionFrame(ts, rec["alpha"].copy(), rec["u"].copy(), rec["l"].copy())


def write_scan(path, points: np.ndarray) -> None:
    """Binary little-endian PLY with float32 x, y, z."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.tobytes())


def read_scan(path) -> np.ndarray:
    """Read a PLY point list (ascii or binary little-endian, float x/y/z)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FrameFormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    fmt = None
    props = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
    if n is None or props[:3] != ["x", "y", "z"]:
        raise FrameFormatError(f"{path}: expected vertex element with x, y, z")
    body = raw[end + len(b"end_header\n") :]
    if fmt == "ascii":
        vals = np.array(body.split(), dtype=float).reshape(n, len(props))
        return vals[:, :3]
    if fmt == "binary_little_endian":
        arr = np.frombuffer(body, dtype="<f4", count=n * len(props)).reshape(n, len(props))
        return arr[:, :3].astype(float)
    raise FrameFormatError(f"{path}: unsupported PLY format {fmt}")


def write_calibration(path, cam: CameraModel) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n")


def read_calibration(path) -> CameraModel:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CalibrationError(f"calibration file not found: {path}") from exc
    return CameraModel.from_dict(d)
