"""Experiment harness: mapping and localization runs over seeds, and ablations.

A seed fixes everything stochastic in one run: the simulated world and its
perception noise (unless ``vary_world`` is off), the odometry noise and the
particle filter. Reports are plain dicts ready for deterministic JSON output.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import Pose2D
from .ingest import augment_scan
from .landmarks import MapBuilder
from .localization import (
    FilterConfig,
    GlobalView,
    LocalCells,
    ParticleFilter,
    WeightConfig,
    build_local_map,
)
from .metrics import LocScore, MapScore, calibration_curve, score_map, score_trajectory
from .panoptic_map import AggregationStrategy, PanopticGridMap
from .simworld import ScenarioConfig, Scenario, generate_scenario, simulate_odometry

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ----------------------------------------------------------------------
# building blocks

def frame_stream(scenario: Scenario, frames: Optional[int] = None):
    """Yield (index, pose, augmented points) for rendered frames."""
    n = len(scenario) if frames is None else min(frames, len(scenario))
    cam = scenario.camera
    for i in range(n):
        r = scenario.render(i)
        yield i, Pose2D(*scenario.poses[i]), augment_scan(r.scan, r.frame, cam)


def build_maps(scenario: Scenario, strategies: Sequence[str], frames: Optional[int] = None,
               track_landmarks: bool = True, local_cells: Optional[list] = None) -> dict[str, PanopticGridMap]:
    """Integrate a scenario into one map per strategy from a single render pass.

    If ``local_cells`` is a list, per-frame local maps are appended to it.
    """
    geom = scenario.truth.geometry
    builders = {
        s: MapBuilder(PanopticGridMap(geom, AggregationStrategy(s), scenario.renderer.k), track_landmarks)
        for s in strategies
    }
    for _, pose, pts in frame_stream(scenario, frames):
        for b in builders.values():
            b.add_frame(pts, pose)
        if local_cells is not None:
            local_cells.append(LocalCells.from_map(build_local_map(pts)))
    return {s: b.map for s, b in builders.items()}


def compute_local_cells(scenario: Scenario, frames: Optional[int] = None) -> list[LocalCells]:
    return [LocalCells.from_map(build_local_map(pts)) for _, _, pts in frame_stream(scenario, frames)]


@dataclass
class LocalizationResult:
    estimates: np.ndarray  # (T-1, 3), one per filter step
    truth: np.ndarray
    spread: np.ndarray
    score: LocScore


def localize(global_view: GlobalView, cells: Sequence[LocalCells], truth_poses: np.ndarray,
             velocities: np.ndarray, dt: float, cfg: FilterConfig, seed: int,
             initial_pose: Optional[Pose2D] = None) -> LocalizationResult:
    """Run the filter over a sequence; step ``i`` uses odometry ``i-1`` and frame ``i``."""
    rng = np.random.default_rng([seed, 0x10C])
    odo = simulate_odometry(velocities, cfg.noise_factor, rng)
    pf = ParticleFilter(global_view, cfg, rng)
    pf.initialize(initial_pose if initial_pose is not None else Pose2D(*truth_poses[0]))
    n = len(cells)
    est = np.zeros((n - 1, 3))
    spread = np.zeros(n - 1)
    for i in range(1, n):
        est[i - 1] = pf.step(odo[i - 1], dt, cells[i])
        spread[i - 1] = pf.particles.spread()
    truth = np.asarray(truth_poses[1:n])
    return LocalizationResult(est, truth, spread, score_trajectory(est, truth))


# ----------------------------------------------------------------------
# configuration

@dataclass
class MappingConfig:
    strategies: list[str] = field(default_factory=lambda: ["evidential"])
    track_landmarks: bool = True
    frames: Optional[int] = None

    def __post_init__(self):
        for s in self.strategies:
            AggregationStrategy(s)


@dataclass
class LocalizationConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    # named weight variants; empty means just filter.weights
    variants: dict[str, WeightConfig] = field(default_factory=dict)
    frames: Optional[int] = None

    def runs(self) -> dict[str, FilterConfig]:
        if not self.variants:
            return {"default": self.filter}
        return {k: replace(self.filter, weights=w) for k, w in self.variants.items()}


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    mapping: Optional[MappingConfig] = field(default_factory=MappingConfig)
    localization: Optional[LocalizationConfig] = None
    vary_world: bool = True
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {"scenario", "seeds", "mapping", "localization", "vary_world", "workers"}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            mapping = d.get("mapping", {})
            loc = d.get("localization")
            lc = None
            if loc is not None:
                loc = dict(loc)
                filt = dict(loc.get("filter", {}))
                if "weights" in filt:
                    filt["weights"] = WeightConfig(**filt["weights"])
                if "init_sigma_yaw_deg" in filt:
                    filt["init_sigma_yaw"] = math.radians(filt.pop("init_sigma_yaw_deg"))
                lc = LocalizationConfig(
                    FilterConfig(**filt),
                    {k: WeightConfig(**v) for k, v in loc.get("variants", {}).items()},
                    loc.get("frames"),
                )
            return cls(
                scenario=ScenarioConfig.from_dict(d.get("scenario", {})),
                seeds=[int(s) for s in d.get("seeds", [0])],
                mapping=None if mapping is None else MappingConfig(**mapping),
                localization=lc,
                vary_world=bool(d.get("vary_world", True)),
                workers=int(d.get("workers", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario.to_dict(),
            "seeds": list(self.seeds),
            "mapping": None if self.mapping is None else asdict(self.mapping),
            "localization": None,
            "vary_world": self.vary_world,
            "workers": self.workers,
        }
        if self.localization is not None:
            out["localization"] = {
                "filter": self.localization.filter.to_dict(),
                "variants": {k: v.to_dict() for k, v in self.localization.variants.items()},
                "frames": self.localization.frames,
            }
        return out


# ----------------------------------------------------------------------
# running

def _scenario_for(cfg: ExperimentConfig, seed: int) -> Scenario:
    sc = cfg.scenario
    if cfg.vary_world:
        sc = replace(sc, seed=seed)
    return generate_scenario(sc)


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """All mapping and localization runs for one seed."""
    scenario = _scenario_for(cfg, seed)
    truth = scenario.truth_map()
    rows, curves, series = [], [], []
    need_cells = cfg.localization is not None
    cells: list = [] if need_cells else None
    loc_frames = cfg.localization.frames if need_cells else None

    if cfg.mapping is not None and cfg.mapping.strategies:
        frames = cfg.mapping.frames
        share = need_cells and frames == loc_frames
        maps = build_maps(scenario, cfg.mapping.strategies, frames, cfg.mapping.track_landmarks,
                          cells if share else None)
        if need_cells and not share:
            cells = compute_local_cells(scenario, loc_frames)
        for strat, m in maps.items():
            s = score_map(m, truth)
            rows.append({"kind": "map", "seed": seed, "name": strat, **s.to_dict()})
            for j, b in enumerate(calibration_curve(m, truth)):
                curves.append({"strategy": strat, "seed": seed, "bin": j, "lower": b.lower, "upper": b.upper,
                               "confidence": b.confidence, "accuracy": b.accuracy, "support": b.support})
    elif need_cells:
        cells = compute_local_cells(scenario, loc_frames)

    if need_cells:
        gview = GlobalView.from_map(truth)
        for name, fcfg in cfg.localization.runs().items():
            res = localize(gview, cells, scenario.poses, scenario.velocities, scenario.dt, fcfg, seed)
            rows.append({"kind": "loc", "seed": seed, "name": name, **res.score.summary()})
            for i in range(len(res.estimates)):
                series.append({
                    "name": name, "seed": seed, "step": i + 1, "t": (i + 1) * scenario.dt,
                    "lateral": float(res.score.lateral[i]), "longitudinal": float(res.score.longitudinal[i]),
                    "yaw_deg": float(res.score.yaw[i]), "spread": float(res.spread[i]),
                })
    return {"rows": rows, "calibration": curves, "errors": series}


def _aggregate(rows: list[dict]) -> list[dict]:
    out = []
    keys = list(dict.fromkeys((r["kind"], r["name"]) for r in rows))  # first-seen order
    for kind, name in keys:
        sel = [r for r in rows if r["kind"] == kind and r["name"] == name]
        agg = {"kind": kind, "name": name, "n": len(sel)}
        for k, v in sel[0].items():
            if k in ("kind", "name", "seed") or not isinstance(v, (int, float)) or isinstance(v, bool):
                continue
            vals = np.array([r[k] for r in sel if r.get(k) is not None], dtype=float)
            if vals.size:
                agg[f"{k}_mean"] = float(vals.mean())
                agg[f"{k}_std"] = float(vals.std())
        out.append(agg)
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run all seeds and assemble the report; also writes files if ``out_dir`` is given.

    On failure, results of the seeds finished so far are flushed to
    ``out_dir`` before the exception propagates.
    """
    results = []
    try:
        if cfg.workers > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for r in pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds):
                    results.append(r)
        else:
            for s in cfg.seeds:
                results.append(run_seed(cfg, s))
    except Exception:
        if out_dir is not None and results:
            write_report(_assemble(cfg, results, partial=True), out_dir)
        raise
    report = _assemble(cfg, results)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _assemble(cfg: ExperimentConfig, results: list[dict], partial: bool = False) -> dict:
    rows = [r for res in results for r in res["rows"]]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "rows": rows,
        "aggregate": _aggregate(rows),
        "calibration": [c for res in results for c in res["calibration"]],
        "errors": [e for res in results for e in res["errors"]],
    }
    if partial:
        report["partial"] = True
    return report


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(x, np.integer):
        return int(x)
    return x


def _write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None or (isinstance(r.get(c), float) and math.isnan(r[c]))
                        else (f"{r[c]:.9g}" if isinstance(r[c], float) else r[c]) for c in columns])


def write_report(report: dict, out_dir) -> list[Path]:
    """report.json plus calibration.csv and errors.csv plot data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in report.items() if k not in ("calibration", "errors")}
    dump_json(body, out / "report.json")
    paths = [out / "report.json"]
    if report.get("calibration"):
        _write_csv(out / "calibration.csv", report["calibration"],
                   ["strategy", "seed", "bin", "lower", "upper", "confidence", "accuracy", "support"])
        paths.append(out / "calibration.csv")
    if report.get("errors"):
        _write_csv(out / "errors.csv", report["errors"],
                   ["name", "seed", "step", "t", "lateral", "longitudinal", "yaw_deg", "spread"])
        paths.append(out / "errors.csv")
    return paths


# ----------------------------------------------------------------------
# ablations

STRATEGIES = ("latest_perception", "log_odds_softmax", "evidential")
R_VALUES = (1.0, 5.0, 10.0, 15.0, 20.0)


def component_variants() -> dict[str, WeightConfig]:
    """Baseline and the step-by-step additions up to the final weight."""
    return {
        "baseline": WeightConfig(regularize=False, use_uncertainty=False, use_instances=False),
        "regularizer": WeightConfig(use_uncertainty=False, use_instances=False),
        "uncertainty": WeightConfig(use_instances=False),
        "instances": WeightConfig(),
    }


def regularizer_variants(values: Iterable[float] = R_VALUES) -> dict[str, WeightConfig]:
    """r-sweep on the regularizer step (semantic term only, no uncertainty weighting)."""
    return {f"r={v:g}": WeightConfig(r=float(v), use_uncertainty=False, use_instances=False) for v in values}


def metric_variants() -> dict[str, WeightConfig]:
    """Raw-score weights for each matching metric."""
    base = dict(regularize=False, use_uncertainty=False, use_instances=False)
    return {m: WeightConfig(metric=m, **base) for m in ("miou", "accuracy", "cosine")}


ABLATIONS = ("strategy", "regularizer", "metric", "components")


def ablation_config(kind: str, base: ExperimentConfig) -> ExperimentConfig:
    if kind == "strategy":
        mapping = base.mapping or MappingConfig()
        return replace(base, mapping=replace(mapping, strategies=list(STRATEGIES)), localization=None)
    loc = base.localization or LocalizationConfig()
    if kind == "regularizer":
        variants = regularizer_variants()
    elif kind == "metric":
        variants = metric_variants()
    elif kind == "components":
        variants = component_variants()
    else:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    return replace(base, mapping=None, localization=replace(loc, variants=variants))


def run_ablation(kind: str, base: ExperimentConfig, out_dir=None) -> dict:
    report = run_experiment(ablation_config(kind, base), out_dir)
    report["ablation"] = kind
    if out_dir is not None:
        write_report(report, out_dir)
    return report
