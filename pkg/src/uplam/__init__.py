"""Uncertainty-aware panoptic BEV mapping and particle-filter localization."""

from .core import (
    DEFAULT_CLASSES,
    NUM_CLASSES,
    UNKNOWN,
    GridGeometry,
    Pose2D,
    SemanticClass,
)
from .evidential import epistemic_uncertainty, normalized_entropy, probabilities, total_evidence
from .ingest import AugmentedPoints, CameraModel, PerceptionFrame, augment_scan
from .landmarks import MapBuilder
from .localization import FilterConfig, ParticleFilter, WeightConfig
from .mapfile import load_map, save_map
from .metrics import score_map, score_trajectory
from .panoptic_map import AggregationStrategy, PanopticGridMap

__version__ = "0.1.0"

__all__ = [
    "AggregationStrategy",
    "AugmentedPoints",
    "CameraModel",
    "DEFAULT_CLASSES",
    "FilterConfig",
    "GridGeometry",
    "MapBuilder",
    "NUM_CLASSES",
    "PanopticGridMap",
    "ParticleFilter",
    "PerceptionFrame",
    "Pose2D",
    "SemanticClass",
    "UNKNOWN",
    "WeightConfig",
    "augment_scan",
    "epistemic_uncertainty",
    "load_map",
    "normalized_entropy",
    "probabilities",
    "save_map",
    "score_map",
    "score_trajectory",
    "total_evidence",
]
