"""Privileged-information training for object detectors.

A teacher that sees an extra training-only input channel (a class-coded
bounding-box mask, or an ingested saliency/depth raster) guides an
architecture-identical RGB student through a feature-distance term, so the
student keeps baseline inference cost while gaining accuracy from the richer
training signal.
"""

from .data import BoxTransform, IngestResult, ingest_coco, ingest_voc, preprocess, split, tile
from .detectors import (
    DetectorHandle,
    build_detector,
    extend_input_channels,
    forward_with_tap,
    load_detector,
    nms,
    registered_architectures,
)
from .masks import FusionSpec, MaskSpec, default_intensity_map, fuse, ingest_raster, render_bbox_mask
from .metrics import EvalReport, average_precision, coco_report, compare_runs, iou, match
from .synthetic import SceneSpec, generate, make_acceptance_suite
from .training import (
    LossBreakdown,
    TrainConfig,
    cosine_distance,
    lupi_loss,
    sweep_alpha,
    train_baseline,
    train_student,
    train_teacher,
)
from .types import BoundingBox, DatasetTriplet, LabeledObject, ObjectSet, PreprocessConfig

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "BoxTransform",
    "DatasetTriplet",
    "DetectorHandle",
    "EvalReport",
    "FusionSpec",
    "IngestResult",
    "LabeledObject",
    "LossBreakdown",
    "MaskSpec",
    "ObjectSet",
    "PreprocessConfig",
    "SceneSpec",
    "TrainConfig",
    "average_precision",
    "build_detector",
    "coco_report",
    "compare_runs",
    "cosine_distance",
    "default_intensity_map",
    "extend_input_channels",
    "forward_with_tap",
    "fuse",
    "generate",
    "ingest_coco",
    "ingest_raster",
    "ingest_voc",
    "iou",
    "load_detector",
    "lupi_loss",
    "make_acceptance_suite",
    "match",
    "nms",
    "preprocess",
    "registered_architectures",
    "render_bbox_mask",
    "split",
    "sweep_alpha",
    "tile",
    "train_baseline",
    "train_student",
    "train_teacher",
]
