"""On-disk sequences: frames, scans, calibration, trajectory and ground truth.

Directory layout::

    scenario.json         generating configuration (if simulated)
    calibration.json      camera model
    poses.csv             t, x, y, yaw       ground-truth vehicle poses
    odometry.csv          t, vx, vy, vyaw    noise-free body-frame velocities
    frames/NNNNNN.evf     perception frames (+ .json sidecars)
    scans/NNNNNN.ply      LiDAR scans in the vehicle frame
    truth.upm             ground-truth map (if known)
    truth_landmarks.csv
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .ingest import CameraModel, PerceptionFrame, read_calibration, read_evf, read_scan, write_calibration, write_evf, write_scan
from .mapfile import export_landmarks_csv, load_map, save_map
from .panoptic_map import PanopticGridMap


class DatasetError(ValueError):
    pass


def write_pose_csv(path, t, poses) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "x", "y", "yaw"])
        for ti, p in zip(t, poses):
            w.writerow([f"{ti:.6f}", f"{p[0]:.9f}", f"{p[1]:.9f}", f"{p[2]:.9f}"])


def read_pose_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (t, poses (T, 3)). Extra columns are ignored."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError as exc:
        raise DatasetError(f"missing pose file {path}") from exc
    try:
        t = np.array([float(r["t"]) for r in rows])
        p = np.array([[float(r["x"]), float(r["y"]), float(r["yaw"])] for r in rows]).reshape(-1, 3)
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: expected columns t, x, y, yaw") from exc
    return t, p


def write_velocity_csv(path, t, vel) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "vx", "vy", "vyaw"])
        for ti, v in zip(t, vel):
            w.writerow([f"{ti:.6f}", f"{v[0]:.9f}", f"{v[1]:.9f}", f"{v[2]:.9f}"])


def read_velocity_csv(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        t = np.array([float(r["t"]) for r in rows])
        v = np.array([[float(r["vx"]), float(r["vy"]), float(r["vyaw"])] for r in rows]).reshape(-1, 3)
    except FileNotFoundError as exc:
        raise DatasetError(f"missing odometry file {path}") from exc
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: expected columns t, vx, vy, vyaw") from exc
    return t, v


@dataclass
class Dataset:
    root: Path
    camera: CameraModel
    timestamps: np.ndarray
    poses: np.ndarray
    velocities: np.ndarray

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.timestamps))) if len(self.timestamps) > 1 else 0.1

    def frame(self, i: int) -> PerceptionFrame:
        return read_evf(self.root / "frames" / f"{i:06d}.evf")

    def scan(self, i: int) -> np.ndarray:
        return read_scan(self.root / "scans" / f"{i:06d}.ply")

    def pairs(self) -> Iterator[tuple[np.ndarray, PerceptionFrame]]:
        for i in range(len(self)):
            yield self.scan(i), self.frame(i)

    def truth_map(self) -> Optional[PanopticGridMap]:
        p = self.root / "truth.upm"
        return load_map(p) if p.exists() else None


def write_dataset(scenario, out_dir) -> Path:
    """Render every frame of a simulated scenario and write it to ``out_dir``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(scenario.config.to_dict(), indent=2, sort_keys=True) + "\n")
    write_calibration(out / "calibration.json", scenario.camera)
    t = scenario.timestamps
    write_pose_csv(out / "poses.csv", t, scenario.poses)
    write_velocity_csv(out / "odometry.csv", t[:-1], scenario.velocities)
    for i in range(len(scenario)):
        r = scenario.render(i)
        write_evf(out / "frames" / f"{i:06d}.evf", r.frame)
        write_scan(out / "scans" / f"{i:06d}.ply", r.scan)
    truth = scenario.truth_map()
    save_map(truth, out / "truth.upm")
    export_landmarks_csv(truth, out / "truth_landmarks.csv")
    return out


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    cam = read_calibration(root / "calibration.json")
    t, poses = read_pose_csv(root / "poses.csv")
    _, vel = read_velocity_csv(root / "odometry.csv")
    if len(vel) != max(len(poses) - 1, 0):
        raise DatasetError("odometry must have one row fewer than poses")
    n = len(list((root / "frames").glob("*.evf")))
    if n != len(poses):
        raise DatasetError(f"{n} frames but {len(poses)} poses")
    return Dataset(root, cam, t, poses, vel)
