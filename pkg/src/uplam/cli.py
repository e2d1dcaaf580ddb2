"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import DatasetError, read_dataset, read_pose_csv, write_dataset
from .experiment import (
    ABLATIONS,
    SCHEMA_VERSION,
    ConfigError,
    ExperimentConfig,
    dump_json,
    localize,
    run_ablation,
)
from .ingest import CalibrationError, FrameFormatError, augment_scan
from .landmarks import MapBuilder
from .localization import FilterConfig, GlobalView, LocalCells, WeightConfig, build_local_map
from .mapfile import MapFileError, export_landmarks_csv, export_rasters, load_map, save_map
from .metrics import GeometryMismatchError, LengthMismatchError, calibration_curve, score_map, score_trajectory
from .panoptic_map import AggregationStrategy, PanopticGridMap
from .simworld import InfeasibleTrajectoryError, ScenarioConfig, generate_scenario

log = logging.getLogger("uplam")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

RUNTIME_ERRORS = (
    DatasetError, MapFileError, FrameFormatError, CalibrationError, InfeasibleTrajectoryError,
    GeometryMismatchError, LengthMismatchError, OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# configuration files

def load_config(path: Optional[str]) -> dict:
    """Read a JSON or TOML config file; ``None`` gives an empty config."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(cfg))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
            node = nxt
        node[parts[-1]] = value
    return out


def _scenario_config(args) -> ScenarioConfig:
    d = apply_overrides(load_config(args.config), args.set)
    d["seed"] = args.seed
    if args.frames is not None:
        d.setdefault("trajectory", {})["frames"] = args.frames
    try:
        return ScenarioConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario config: {exc}") from exc


def _filter_config(args) -> FilterConfig:
    d = apply_overrides(load_config(args.config), args.set)
    w = dict(d.pop("weights", {}))
    if args.r is not None:
        w["r"] = args.r
    if args.metric is not None:
        w["metric"] = args.metric
    if args.no_uncertainty:
        w["use_uncertainty"] = False
    if args.no_instances:
        w["use_instances"] = False
    if args.baseline:
        w.update(regularize=False, use_uncertainty=False, use_instances=False)
    if args.particles is not None:
        d["num_particles"] = args.particles
    try:
        return FilterConfig(weights=WeightConfig(**w), **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid filter config: {exc}") from exc


# ----------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    cfg = _scenario_config(args)
    scenario = generate_scenario(cfg)
    out = write_dataset(scenario, args.out)
    print(f"wrote {len(scenario)} frames, {len(scenario.world.landmarks)} landmarks to {out}")
    return EXIT_OK


def _build_map(ds, strategy: str, track: bool, truth: Optional[PanopticGridMap], frames: Optional[int]):
    if truth is None:
        raise ConfigError("dataset has no truth.upm to take the map geometry from")
    m = PanopticGridMap(truth.geometry, AggregationStrategy(strategy), truth.num_classes)
    b = MapBuilder(m, track)
    n = len(ds) if frames is None else min(frames, len(ds))
    for i in range(n):
        b.add_frame(augment_scan(ds.scan(i), ds.frame(i), ds.camera), _pose(ds.poses[i]))
    return m


def _pose(p):
    from .core import Pose2D
    return Pose2D(float(p[0]), float(p[1]), float(p[2]))


def cmd_map(args) -> int:
    ds = read_dataset(args.dataset)
    truth = ds.truth_map()
    m = _build_map(ds, args.strategy, not args.no_landmarks, truth, args.frames)
    save_map(m, args.out)
    if args.export:
        export_rasters(m, args.export, truth)
        export_landmarks_csv(m, Path(args.export) / "landmarks.csv")
    if args.report:
        report = {"schema_version": SCHEMA_VERSION, "kind": "map", "strategy": args.strategy,
                  "frames": int(len(ds) if args.frames is None else min(args.frames, len(ds))),
                  "landmarks": len(m.landmarks), "observed_cells": int(m.observed.sum())}
        if truth is not None:
            report["score"] = score_map(m, truth).to_dict()
        dump_json(report, args.report)
    print(f"map with {int(m.observed.sum())} observed cells and {len(m.landmarks)} landmarks -> {args.out}")
    return EXIT_OK


def write_trajectory_csv(path, t, est, spread) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "x", "y", "yaw", "spread"])
        for ti, p, s in zip(t, est, spread):
            w.writerow([f"{ti:.6f}", f"{p[0]:.9f}", f"{p[1]:.9f}", f"{p[2]:.9f}", f"{s:.9f}"])


def _errors_csv(path, t, score) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "lateral", "longitudinal", "yaw_deg"])
        for row in zip(t, score.lateral, score.longitudinal, score.yaw):
            w.writerow([f"{v:.9g}" for v in row])


def cmd_localize(args) -> int:
    cfg = _filter_config(args)
    ds = read_dataset(args.dataset)
    gmap = load_map(args.map) if args.map else ds.truth_map()
    if gmap is None:
        raise ConfigError("no global map: pass --map or use a dataset with truth.upm")
    n = len(ds) if args.frames is None else min(args.frames, len(ds))
    cells = [LocalCells.from_map(build_local_map(augment_scan(ds.scan(i), ds.frame(i), ds.camera)))
             for i in range(n)]
    res = localize(GlobalView.from_map(gmap), cells, ds.poses[:n], ds.velocities, ds.dt, cfg, args.seed)
    t = ds.timestamps[1:n]
    write_trajectory_csv(args.out, t, res.estimates, res.spread)
    if args.report:
        dump_json({"schema_version": SCHEMA_VERSION, "kind": "localization", "seed": args.seed,
                   "filter": cfg.to_dict(), "steps": len(res.estimates),
                   "score": res.score.summary()}, args.report)
    if args.errors_csv:
        _errors_csv(args.errors_csv, t, res.score)
    print(f"trans MAE {res.score.trans_mae:.3f} m, yaw MAE {res.score.yaw_mae:.3f} deg -> {args.out}")
    return EXIT_OK


def cmd_eval_map(args) -> int:
    m, truth = load_map(args.map), load_map(args.truth)
    score = score_map(m, truth)
    curve = calibration_curve(m, truth, args.bins)
    dump_json({"schema_version": SCHEMA_VERSION, "kind": "map_score", "score": score.to_dict(),
               "calibration": [vars(b) for b in curve]}, args.out)
    if args.calibration_csv:
        with open(args.calibration_csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["lower", "upper", "confidence", "accuracy", "support"])
            for b in curve:
                w.writerow([f"{b.lower:.6g}", f"{b.upper:.6g}",
                            "" if b.empty else f"{b.confidence:.9g}",
                            "" if b.empty else f"{b.accuracy:.9g}", b.support])
    print(f"mIoU {score.miou:.4f}, uECE {score.uece:.4f}")
    return EXIT_OK


def cmd_eval_traj(args) -> int:
    te, est = read_pose_csv(args.trajectory)
    tt, gt = read_pose_csv(args.truth)
    # align on timestamps (microsecond resolution)
    index = {round(t * 1e6): i for i, t in enumerate(tt)}
    try:
        sel = [index[round(t * 1e6)] for t in te]
    except KeyError as exc:
        raise LengthMismatchError("estimated timestamps not found in the ground truth") from exc
    score = score_trajectory(est, gt[sel])
    dump_json({"schema_version": SCHEMA_VERSION, "kind": "trajectory_score", "steps": len(est),
               "score": score.summary()}, args.out)
    if args.errors_csv:
        _errors_csv(args.errors_csv, te, score)
    print(f"trans MAE {score.trans_mae:.3f} m, lat {score.lat_mae:.3f}, long {score.lon_mae:.3f}, "
          f"yaw {score.yaw_mae:.3f} deg")
    return EXIT_OK


def cmd_ablate(args) -> int:
    d = apply_overrides(load_config(args.config), args.set)
    d["seeds"] = list(range(args.seed, args.seed + args.runs))
    if args.workers is not None:
        d["workers"] = args.workers
    cfg = ExperimentConfig.from_dict(d)
    report = run_ablation(args.kind, cfg, args.out)
    for row in report["aggregate"]:
        if row["kind"] == "map":
            print(f"{row['name']:>20}  mIoU {row['miou_mean']:.4f}  uECE {row['uece_mean']:.4f}")
        else:
            print(f"{row['name']:>20}  trans MAE {row['trans_mae_mean']:.4f} ± {row['trans_mae_std']:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uplam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_opts(sp):
        sp.add_argument("--config", help="JSON or TOML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted key, JSON value); repeatable")

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    config_opts(s)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("map", help="build a global map from a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--strategy", default="evidential", choices=[x.value for x in AggregationStrategy])
    s.add_argument("--no-landmarks", action="store_true", help="skip MAD filtering and association")
    s.add_argument("--frames", type=int)
    s.add_argument("--out", required=True, help="output .upm file")
    s.add_argument("--report", help="JSON summary (scored against truth.upm when present)")
    s.add_argument("--export", help="directory for PNG rasters and landmarks.csv")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("localize", help="run the particle filter on a dataset")
    config_opts(s)
    s.add_argument("--dataset", required=True)
    s.add_argument("--map", help="global map (default: the dataset's truth.upm)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--particles", type=int)
    s.add_argument("--r", type=float, help="regularizer")
    s.add_argument("--metric", choices=["miou", "accuracy", "cosine"])
    s.add_argument("--no-uncertainty", action="store_true")
    s.add_argument("--no-instances", action="store_true")
    s.add_argument("--baseline", action="store_true", help="raw semantic mIoU as weight")
    s.add_argument("--out", required=True, help="trajectory CSV")
    s.add_argument("--report")
    s.add_argument("--errors-csv")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval-map", help="score a map against ground truth")
    s.add_argument("--map", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--calibration-csv")
    s.set_defaults(func=cmd_eval_map)

    s = sub.add_parser("eval-traj", help="score a trajectory against ground truth")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--truth", required=True, help="poses.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--errors-csv")
    s.set_defaults(func=cmd_eval_traj)

    s = sub.add_parser("ablate", help="run an ablation sweep over seeds")
    config_opts(s)
    s.add_argument("--kind", required=True, choices=ABLATIONS)
    s.add_argument("--seed", type=int, required=True, help="first seed")
    s.add_argument("--runs", type=int, default=5, help="number of consecutive seeds")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError) as exc:
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
