"""Run configuration: one YAML file drives prepare, train, sweep, evaluate,
gradcam, and profile, with command-line overrides for alpha, seed, epochs.

Validation is total before any side effect: every problem is collected with
its field path and reported at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .detectors import registered_architectures

SCHEMA_VERSION = 1

DATASET_FORMATS = ("synthetic", "coco", "voc")
PRIVILEGED_MODES = ("bbox_mask", "external", "fusion")


class ConfigError(Exception):
    def __init__(self, issues: list[str]):
        self.issues = issues
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {i}" for i in issues))


@dataclass
class SyntheticBlock:
    n_train: int = 300
    n_val: int = 60
    n_test: int = 60
    image_size: int = 64
    class_count: int = 3
    min_objects: int = 1
    max_objects: int = 4
    size_min: int = 9
    size_max: int = 18


@dataclass
class DatasetBlock:
    format: str = "synthetic"
    annotations: Optional[str] = None
    image_root: Optional[str] = None
    xml_dir: Optional[str] = None
    class_names: Optional[list[str]] = None
    tile_grid: tuple[int, int] = (1, 1)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    synthetic: SyntheticBlock = field(default_factory=SyntheticBlock)


@dataclass
class PrivilegedBlock:
    mode: str = "bbox_mask"
    source: Optional[str] = None                 # external mode: saliency | depth
    saliency_dir: Optional[str] = None
    depth_dir: Optional[str] = None
    fusion_weights: Optional[dict[str, float]] = None  # roles: mask, saliency, depth
    intensity_map: Optional[dict[int, int]] = None


@dataclass
class ModelBlock:
    architecture_id: str = "tiny"
    pretrained: bool = False


@dataclass
class PreprocessBlock:
    target_size: int = 800
    channel_stats: Optional[dict] = None  # {"mean": [...], "std": [...]}


@dataclass
class TrainBlock:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 8
    early_stop_patience: int = 10
    seed: int = 0
    alpha: Union[float, list[float]] = 0.5
    monitor: str = "combined"
    teacher_checkpoint: Optional[str] = None


@dataclass
class EvalBlock:
    split: str = "test"
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    output_dir: str = "runs/default"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    privileged: PrivilegedBlock = field(default_factory=PrivilegedBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    preprocess: PreprocessBlock = field(default_factory=PreprocessBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    @property
    def alphas(self) -> list[float]:
        a = self.train.alpha
        return [float(x) for x in a] if isinstance(a, list) else [float(a)]

    @property
    def prepared_dir(self) -> Path:
        return Path(self.output_dir) / "prepared"


def _build_block(cls, raw: dict, path: str, issues: list[str]):
    kwargs = {}
    valid = {f.name for f in cls.__dataclass_fields__.values()}
    for key, value in raw.items():
        if key not in valid:
            issues.append(f"{path}.{key}: unknown field")
            continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        issues.append(f"{path}: {e}")
        return cls()


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig from a parsed YAML mapping, collecting all problems."""
    issues: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        issues.append(f"schema_version: expected {SCHEMA_VERSION}, got {version}")

    known = {"schema_version", "output_dir", "dataset", "privileged", "model", "preprocess",
             "train", "eval"}
    for key in raw:
        if key not in known:
            issues.append(f"{key}: unknown top-level field")

    dataset_raw = dict(raw.get("dataset", {}))
    synthetic_raw = dataset_raw.pop("synthetic", {})
    dataset = _build_block(DatasetBlock, dataset_raw, "dataset", issues)
    dataset.synthetic = _build_block(SyntheticBlock, synthetic_raw, "dataset.synthetic", issues)
    if isinstance(dataset.tile_grid, list):
        dataset.tile_grid = tuple(dataset.tile_grid)
    if isinstance(dataset.split_fractions, list):
        dataset.split_fractions = tuple(dataset.split_fractions)

    cfg = RunConfig(
        schema_version=SCHEMA_VERSION,
        output_dir=str(raw.get("output_dir", "runs/default")),
        dataset=dataset,
        privileged=_build_block(PrivilegedBlock, raw.get("privileged", {}), "privileged", issues),
        model=_build_block(ModelBlock, raw.get("model", {}), "model", issues),
        preprocess=_build_block(PreprocessBlock, raw.get("preprocess", {}), "preprocess", issues),
        train=_build_block(TrainBlock, raw.get("train", {}), "train", issues),
        eval=_build_block(EvalBlock, raw.get("eval", {}), "eval", issues),
    )
    issues.extend(validate_config(cfg))
    if issues:
        raise ConfigError(issues)
    return cfg


def validate_config(cfg: RunConfig) -> list[str]:
    issues: list[str] = []
    d = cfg.dataset
    if d.format not in DATASET_FORMATS:
        issues.append(f"dataset.format: '{d.format}' not one of {DATASET_FORMATS}")
    if d.format == "coco":
        if not d.annotations:
            issues.append("dataset.annotations: required for coco format")
        elif not Path(d.annotations).exists():
            issues.append(f"dataset.annotations: path does not exist: {d.annotations}")
        if not d.image_root:
            issues.append("dataset.image_root: required for coco format")
        elif not Path(d.image_root).exists():
            issues.append(f"dataset.image_root: path does not exist: {d.image_root}")
    if d.format == "voc":
        if not d.xml_dir:
            issues.append("dataset.xml_dir: required for voc format")
        elif not Path(d.xml_dir).exists():
            issues.append(f"dataset.xml_dir: path does not exist: {d.xml_dir}")
        if not d.image_root:
            issues.append("dataset.image_root: required for voc format")
        if not d.class_names:
            issues.append("dataset.class_names: required for voc format")
    if len(d.tile_grid) != 2 or any(int(g) < 1 for g in d.tile_grid):
        issues.append(f"dataset.tile_grid: must be two integers >= 1, got {d.tile_grid}")
    if len(d.split_fractions) != 3:
        issues.append("dataset.split_fractions: must have three entries")
    elif abs(sum(d.split_fractions) - 1.0) > 1e-9:
        issues.append(f"dataset.split_fractions: must sum to 1, got {d.split_fractions}")

    p = cfg.privileged
    if p.mode not in PRIVILEGED_MODES:
        issues.append(f"privileged.mode: '{p.mode}' not one of {PRIVILEGED_MODES}")
    if p.mode == "external":
        if p.source not in ("saliency", "depth"):
            issues.append("privileged.source: external mode needs 'saliency' or 'depth'")
        else:
            src_dir = p.saliency_dir if p.source == "saliency" else p.depth_dir
            if not src_dir:
                issues.append(f"privileged.{p.source}_dir: required for external mode")
            elif not Path(src_dir).exists():
                issues.append(f"privileged.{p.source}_dir: path does not exist: {src_dir}")
    if p.mode == "fusion":
        if not p.fusion_weights:
            issues.append("privileged.fusion_weights: required for fusion mode")
        else:
            if abs(sum(p.fusion_weights.values()) - 1.0) > 1e-9:
                issues.append("privileged.fusion_weights: must sum to 1")
            for role in p.fusion_weights:
                if role not in ("mask", "saliency", "depth"):
                    issues.append(f"privileged.fusion_weights.{role}: unknown source role")
                elif role != "mask":
                    src_dir = p.saliency_dir if role == "saliency" else p.depth_dir
                    if not src_dir or not Path(src_dir).exists():
                        issues.append(f"privileged.{role}_dir: required and must exist for fusion")

    if cfg.model.architecture_id not in registered_architectures():
        issues.append(
            f"model.architecture_id: '{cfg.model.architecture_id}' not registered "
            f"({registered_architectures()})"
        )
    if cfg.preprocess.target_size <= 0:
        issues.append("preprocess.target_size: must be > 0")
    if cfg.preprocess.channel_stats is not None:
        stats = cfg.preprocess.channel_stats
        if not isinstance(stats, dict) or "mean" not in stats or "std" not in stats:
            issues.append("preprocess.channel_stats: needs 'mean' and 'std' lists")

    t = cfg.train
    if t.epochs < 1:
        issues.append("train.epochs: must be >= 1")
    if t.learning_rate <= 0:
        issues.append("train.learning_rate: must be > 0")
    if t.batch_size < 1:
        issues.append("train.batch_size: must be >= 1")
    if t.monitor not in ("combined", "detection"):
        issues.append(f"train.monitor: '{t.monitor}' not one of ('combined', 'detection')")
    for a in cfg.alphas:
        if not 0.0 <= a <= 1.0:
            issues.append(f"train.alpha: {a} outside [0, 1]")
    if t.teacher_checkpoint and not Path(t.teacher_checkpoint).exists():
        issues.append(f"train.teacher_checkpoint: path does not exist: {t.teacher_checkpoint}")

    e = cfg.eval
    if e.split not in ("train", "val", "test"):
        issues.append(f"eval.split: '{e.split}' not one of ('train', 'val', 'test')")
    if not 0.0 <= e.score_threshold <= 1.0:
        issues.append("eval.score_threshold: must be in [0, 1]")
    if not 0.0 <= e.nms_iou <= 1.0:
        issues.append("eval.nms_iou: must be in [0, 1]")
    if e.max_detections < 1:
        issues.append("eval.max_detections: must be >= 1")
    return issues


def load_config(
    path: Path | str,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    alpha: Optional[float] = None,
    epochs: Optional[int] = None,
) -> RunConfig:
    """Parse and validate a YAML config file, applying CLI overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"config is not valid YAML: {e}"])
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    if alpha is not None:
        raw.setdefault("train", {})["alpha"] = alpha
    if epochs is not None:
        raw.setdefault("train", {})["epochs"] = epochs
    return parse_config(raw)
