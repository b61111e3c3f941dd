"""Teacher and student training: the distance-regularized combined loss,
early-stopped Adam loops, and the alpha sweep.

The student objective mixes the architecture's native detection loss with the
cosine distance between teacher and student tap-point features:

    combined = (1 - alpha) * detection_loss + alpha * distance

alpha = 0 recovers the baseline exactly (the loop is arithmetic-identical to a
baseline run under the same seed and data order); alpha = 1 trains on teacher
guidance alone while the detection loss is still computed for logging. Data
order is derived from (seed, epoch), so twin runs are reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional

if TYPE_CHECKING:
    from .metrics import EvalReport

import numpy as np
import torch
from torch import nn

from .data import PreprocessedSample, preprocess
from .detectors import (
    DetectorHandle,
    build_detector,
    forward_with_tap,
    load_detector,
    parameter_digest,
    save_checkpoint,
)
from .types import DatasetTriplet, PreprocessConfig

logger = logging.getLogger(__name__)


def cosine_distance(a, b) -> torch.Tensor:
    """1 - cos(a, b) for equal-length vectors; in [0, 2].

    Zero-norm inputs yield the maximally uninformative distance 1 (logged).
    Gradients flow through torch tensor inputs.
    """
    a = torch.as_tensor(a, dtype=torch.float32) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float32) if not torch.is_tensor(b) else b
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_distance expects 1-D vectors")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        logger.warning("cosine_distance on zero-norm vector; returning 1")
        return torch.tensor(1.0)
    return (1.0 - torch.dot(a, b) / (na * nb)).clamp(0.0, 2.0)


def batch_feature_distance(teacher_flat: torch.Tensor, student_flat: torch.Tensor) -> torch.Tensor:
    """Mean per-image cosine distance over a batch of flattened features."""
    if teacher_flat.shape != student_flat.shape:
        raise ValueError(
            f"feature shape mismatch: {tuple(teacher_flat.shape)} vs {tuple(student_flat.shape)}"
        )
    dists = [cosine_distance(teacher_flat[i], student_flat[i]) for i in range(teacher_flat.shape[0])]
    return torch.stack(dists).mean()


@dataclass
class LossBreakdown:
    """Per-step record of the combined-loss components."""

    detection_loss: float
    distill_distance: float
    alpha: float
    combined: float
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.detection_loss < 0:
            raise ValueError(f"detection loss must be >= 0, got {self.detection_loss}")
        if not 0.0 <= self.distill_distance <= 2.0:
            raise ValueError(f"distance must be in [0, 2], got {self.distill_distance}")
        expected = (1.0 - self.alpha) * self.detection_loss + self.alpha * self.distill_distance
        if abs(self.combined - expected) > 1e-9:
            raise ValueError(f"combined {self.combined} != {expected} from components")


def lupi_loss(
    det_loss: float, distance: float, alpha: float, epoch: int = 0, step: int = 0
) -> LossBreakdown:
    """Combine detection supervision and teacher guidance at weight alpha."""
    det_loss, distance = float(det_loss), float(distance)
    combined = (1.0 - alpha) * det_loss + alpha * distance
    return LossBreakdown(
        detection_loss=det_loss,
        distill_distance=distance,
        alpha=alpha,
        combined=combined,
        epoch=epoch,
        step=step,
    )


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    early_stop_patience: int = 10
    batch_size: int = 8
    seed: int = 0
    monitor: str = "combined"  # student early stopping: "combined" or "detection"
    cache_teacher_features: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer '{self.optimizer}'")
        if self.monitor not in ("combined", "detection"):
            raise ValueError(f"monitor must be 'combined' or 'detection', got '{self.monitor}'")


class EarlyStopper:
    """Stop when the monitored value has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.epochs_since_best = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool]:
        """Returns (is_best, should_stop)."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.epochs_since_best = 0
            return True, False
        self.epochs_since_best += 1
        return False, self.epochs_since_best >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    is_best: bool


@dataclass
class TrainResult:
    run_id: str
    checkpoint_path: Path
    log_path: Path
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    history: list[EpochRecord] = field(default_factory=list)
    teacher_digest_before: Optional[str] = None
    teacher_digest_after: Optional[str] = None


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng((seed, epoch)).permutation(n)


def _prepare_samples(
    triplets: list[DatasetTriplet], cfg: Optional[PreprocessConfig]
) -> list[PreprocessedSample]:
    cfg = cfg or PreprocessConfig()
    return [preprocess(t, cfg) for t in triplets]


def _targets_of(samples: list[PreprocessedSample], idx) -> list[dict]:
    targets = []
    for i in idx:
        truth = samples[i].truth
        boxes = torch.tensor(
            [[o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max] for o in truth],
            dtype=torch.float32,
        ).reshape(-1, 4)
        labels = torch.tensor([o.label for o in truth], dtype=torch.long)
        targets.append({"boxes": boxes, "labels": labels})
    return targets


class _norm_stats_frozen:
    """Temporarily put batch-norm layers in eval mode (protects running stats
    when computing validation losses through train-mode forwards)."""

    def __init__(self, model: nn.Module):
        self.model = model
        self.saved: list[tuple[nn.Module, bool]] = []

    def __enter__(self):
        for m in self.model.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                self.saved.append((m, m.training))
                m.eval()
        return self

    def __exit__(self, *exc):
        for m, was_training in self.saved:
            m.train(was_training)


def _run_prefix(architecture_id: str, role: str, alpha: Optional[float]) -> str:
    alpha_part = "na" if alpha is None else format(alpha, "g")
    return f"{architecture_id}.{role}.{alpha_part}"


def _checkpoint_name(architecture_id: str, role: str, alpha: Optional[float], epoch: int) -> str:
    return f"{_run_prefix(architecture_id, role, alpha)}.{epoch}.ckpt"


class _StepLogger:
    """Append-only line-delimited log, one record per training step."""

    def __init__(self, path: Path, run_id: str):
        self.path = path
        self.run_id = run_id
        self.file = open(path, "a")

    def write(self, breakdown: LossBreakdown, lr: float):
        record = {
            "run_id": self.run_id,
            "epoch": breakdown.epoch,
            "step": breakdown.step,
            "det_loss": breakdown.detection_loss,
            "distill_distance": breakdown.distill_distance,
            "alpha": breakdown.alpha,
            "combined": breakdown.combined,
            "lr": lr,
            "wall_time": time.time(),
        }
        self.file.write(json.dumps(record) + "\n")

    def close(self):
        self.file.close()


def _fit(
    handle: DetectorHandle,
    n_train: int,
    cfg: TrainConfig,
    out_dir: Path,
    run_id: str,
    role: str,
    alpha: Optional[float],
    train_step: Callable[[np.ndarray, int, int], tuple[torch.Tensor, LossBreakdown]],
    val_fn: Callable[[], float],
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # pin the torch stream at loop entry so twin runs (same seed, same data
    # order) stay step-identical regardless of how much RNG construction used
    torch.manual_seed(cfg.seed)
    params = handle.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    stopper = EarlyStopper(cfg.early_stop_patience)
    step_log = _StepLogger(out_dir / "steps.jsonl", run_id)
    epoch_log = open(out_dir / "epochs.jsonl", "a")
    history: list[EpochRecord] = []
    best_path: Optional[Path] = None

    try:
        for epoch in range(start_epoch, cfg.epochs):
            handle.model.train()
            order = epoch_order(cfg.seed, epoch, n_train)
            epoch_losses = []
            for step, lo in enumerate(range(0, n_train, cfg.batch_size)):
                batch_idx = order[lo : lo + cfg.batch_size]
                loss, breakdown = train_step(batch_idx, epoch, step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(breakdown.combined)
                step_log.write(breakdown, cfg.learning_rate)

            val_loss = val_fn()
            is_best, should_stop = stopper.update(val_loss, epoch)
            if is_best:
                best_path = out_dir / _checkpoint_name(handle.architecture_id, role, alpha, epoch)
                save_checkpoint(handle, best_path, role=role, alpha=alpha, epoch=epoch)
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)) if epoch_losses else 0.0,
                val_loss=val_loss,
                is_best=is_best,
            )
            history.append(record)
            epoch_log.write(json.dumps(record.__dict__) + "\n")
            if should_stop:
                logger.info(
                    "%s: early stop at epoch %d (best %d)", run_id, epoch, stopper.best_epoch
                )
                break
    finally:
        step_log.close()
        epoch_log.close()

    if best_path is None:
        raise RuntimeError(f"{run_id}: no epochs ran, nothing to checkpoint")
    marker = out_dir / f"{_run_prefix(handle.architecture_id, role, alpha)}.best"
    marker.write_text(best_path.name + "\n")
    return TrainResult(
        run_id=run_id,
        checkpoint_path=best_path,
        log_path=out_dir / "steps.jsonl",
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        epochs_run=len(history),
        history=history,
    )


def _detection_val_loss(handle, samples, batch_size) -> float:
    losses = []
    with torch.no_grad(), _norm_stats_frozen(handle.model):
        for lo in range(0, len(samples), batch_size):
            idx = list(range(lo, min(lo + batch_size, len(samples))))
            images = torch.stack([samples[i].model_input for i in idx])
            loss_dict, _ = forward_with_tap(handle, images, targets=_targets_of(samples, idx))
            losses.append(float(sum(v for v in loss_dict.values())))
    return float(np.mean(losses))


def _require_privileged(triplets: list[DatasetTriplet], who: str) -> None:
    missing = [t.image_id for t in triplets if t.privileged is None]
    if missing:
        raise ValueError(
            f"{who} requires a privileged raster on every triplet; missing for "
            f"{missing[:5]}{'...' if len(missing) > 5 else ''}"
        )


def train_teacher(
    train_triplets: list[DatasetTriplet],
    val_triplets: list[DatasetTriplet],
    handle: DetectorHandle,
    cfg: TrainConfig,
    out_dir: Path | str,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    run_id: Optional[str] = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Train a 4-channel teacher on stacked (RGB || privileged) inputs with the
    architecture's native detection loss; keeps the best-validation checkpoint."""
    if handle.input_channels != 4:
        raise ValueError("teacher training requires a 4-channel handle")
    _require_privileged(train_triplets, "train_teacher")
    _require_privileged(val_triplets, "train_teacher")
    train_samples = _prepare_samples(train_triplets, preprocess_cfg)
    val_samples = _prepare_samples(val_triplets, preprocess_cfg)
    run_id = run_id or f"{handle.architecture_id}.teacher.s{cfg.seed}"

    def step(batch_idx, epoch, step_no):
        images = torch.stack([train_samples[i].model_input for i in batch_idx])
        loss_dict, _ = forward_with_tap(handle, images, targets=_targets_of(train_samples, batch_idx))
        det = sum(v for v in loss_dict.values())
        return det, lupi_loss(det.item(), 0.0, 0.0, epoch, step_no)

    return _fit(
        handle,
        len(train_samples),
        cfg,
        Path(out_dir),
        run_id,
        role="teacher",
        alpha=None,
        train_step=step,
        val_fn=lambda: _detection_val_loss(handle, val_samples, cfg.batch_size),
        start_epoch=start_epoch,
    )


def train_baseline(
    train_triplets: list[DatasetTriplet],
    val_triplets: list[DatasetTriplet],
    handle: DetectorHandle,
    cfg: TrainConfig,
    out_dir: Path | str,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    run_id: Optional[str] = None,
) -> TrainResult:
    """RGB-only training with no teacher term (the alpha = 0 degenerate case)."""
    if handle.input_channels != 3:
        raise ValueError("baseline training requires a 3-channel handle")
    train_samples = _prepare_samples([t_without_privileged(t) for t in train_triplets], preprocess_cfg)
    val_samples = _prepare_samples([t_without_privileged(t) for t in val_triplets], preprocess_cfg)
    run_id = run_id or f"{handle.architecture_id}.baseline.s{cfg.seed}"

    def step(batch_idx, epoch, step_no):
        images = torch.stack([train_samples[i].image for i in batch_idx])
        loss_dict, _ = forward_with_tap(handle, images, targets=_targets_of(train_samples, batch_idx))
        det = sum(v for v in loss_dict.values())
        return det, lupi_loss(det.item(), 0.0, 0.0, epoch, step_no)

    return _fit(
        handle,
        len(train_samples),
        cfg,
        Path(out_dir),
        run_id,
        role="baseline",
        alpha=0.0,
        train_step=step,
        val_fn=lambda: _detection_val_loss(handle, val_samples, cfg.batch_size),
    )


def t_without_privileged(t: DatasetTriplet) -> DatasetTriplet:
    if t.privileged is None:
        return t
    return DatasetTriplet(image=t.image, truth=t.truth, privileged=None)


def _teacher_features(
    teacher: DetectorHandle, samples: list[PreprocessedSample], batch_size: int
) -> torch.Tensor:
    """Flattened frozen-teacher tap features for every sample, detached."""
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            images = torch.stack([s.model_input for s in samples[lo : lo + batch_size]])
            _, tap = forward_with_tap(teacher, images)
            chunks.append(tap.flattened().detach())
    return torch.cat(chunks, dim=0)


def train_student(
    train_triplets: list[DatasetTriplet],
    val_triplets: list[DatasetTriplet],
    teacher_checkpoint: Path | str,
    handle: DetectorHandle,
    alpha: float,
    cfg: TrainConfig,
    out_dir: Path | str,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    run_id: Optional[str] = None,
) -> TrainResult:
    """Train an RGB student against a frozen 4-channel teacher.

    Per step the teacher runs in eval mode on (RGB || privileged) while the
    student trains on RGB; parameters update on the combined loss. The teacher
    parameter digest is verified unchanged across the run.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if handle.input_channels != 3:
        raise ValueError("student training requires a 3-channel handle")
    teacher = load_detector(teacher_checkpoint)
    if teacher.input_channels != 4:
        raise ValueError("teacher checkpoint must be 4-channel")
    if teacher.architecture_id != handle.architecture_id:
        raise ValueError(
            f"architecture mismatch: teacher '{teacher.architecture_id}' vs "
            f"student '{handle.architecture_id}'"
        )
    _require_privileged(train_triplets, "train_student")
    _require_privileged(val_triplets, "train_student")
    teacher.freeze()
    digest_before = parameter_digest(teacher.model)

    train_samples = _prepare_samples(train_triplets, preprocess_cfg)
    val_samples = _prepare_samples(val_triplets, preprocess_cfg)
    run_id = run_id or f"{handle.architecture_id}.student.a{alpha:g}.s{cfg.seed}"

    cached: Optional[torch.Tensor] = None
    cached_val: Optional[torch.Tensor] = None
    if cfg.cache_teacher_features:
        cached = _teacher_features(teacher, train_samples, cfg.batch_size)
        cached_val = _teacher_features(teacher, val_samples, cfg.batch_size)

    def teacher_flat(samples, batch_idx, cache):
        if cache is not None:
            return cache[list(batch_idx)]
        images = torch.stack([samples[i].model_input for i in batch_idx])
        with torch.no_grad():
            _, tap = forward_with_tap(teacher, images)
        return tap.flattened().detach()

    def step(batch_idx, epoch, step_no):
        images = torch.stack([train_samples[i].image for i in batch_idx])
        loss_dict, tap = forward_with_tap(handle, images, targets=_targets_of(train_samples, batch_idx))
        det = sum(v for v in loss_dict.values())
        t_flat = teacher_flat(train_samples, batch_idx, cached)
        if alpha == 0.0:
            # exact baseline arithmetic: the distance is logged, never in the graph
            with torch.no_grad():
                distance = batch_feature_distance(t_flat, tap.flattened())
            loss = det
        elif alpha == 1.0:
            distance = batch_feature_distance(t_flat, tap.flattened())
            loss = distance
        else:
            distance = batch_feature_distance(t_flat, tap.flattened())
            loss = (1.0 - alpha) * det + alpha * distance
        return loss, lupi_loss(det.item(), float(distance.detach()), alpha, epoch, step_no)

    def val_fn():
        det_losses, distances = [], []
        with torch.no_grad(), _norm_stats_frozen(handle.model):
            for lo in range(0, len(val_samples), cfg.batch_size):
                idx = list(range(lo, min(lo + cfg.batch_size, len(val_samples))))
                images = torch.stack([val_samples[i].image for i in idx])
                loss_dict, tap = forward_with_tap(handle, images, targets=_targets_of(val_samples, idx))
                det_losses.append(float(sum(v for v in loss_dict.values())))
                t_flat = teacher_flat(val_samples, idx, cached_val)
                distances.append(float(batch_feature_distance(t_flat, tap.flattened())))
        det, dist = float(np.mean(det_losses)), float(np.mean(distances))
        return det if cfg.monitor == "detection" else (1.0 - alpha) * det + alpha * dist

    result = _fit(
        handle,
        len(train_samples),
        cfg,
        Path(out_dir),
        run_id,
        role="student",
        alpha=alpha,
        train_step=step,
        val_fn=val_fn,
    )
    digest_after = parameter_digest(teacher.model)
    if digest_after != digest_before:
        raise RuntimeError("teacher parameters changed during student training")
    result.teacher_digest_before = digest_before
    result.teacher_digest_after = digest_after
    return result


@dataclass
class SweepEntry:
    alpha: float
    result: TrainResult
    report: Optional["EvalReport"] = None  # filled by callers that evaluate


def sweep_alpha(
    train_triplets: list[DatasetTriplet],
    val_triplets: list[DatasetTriplet],
    teacher_checkpoint: Path | str,
    architecture_id: str,
    alphas: list[float],
    cfg: TrainConfig,
    out_dir: Path | str,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    image_size: Optional[int] = None,
    class_count: Optional[int] = None,
) -> list[SweepEntry]:
    """One student per alpha under identical seed and data order.

    Duplicate alphas are dropped with a warning. Evaluation of the resulting
    checkpoints (and flagging of the best strict mAP) is the caller's step, so
    the sweep itself stays free of inference policy.
    """
    if not alphas:
        raise ValueError("alphas must be nonempty")
    unique: list[float] = []
    for a in alphas:
        if a in unique:
            logger.warning("duplicate alpha %s dropped from sweep", a)
            continue
        unique.append(a)
    if class_count is None:
        from .detectors import read_checkpoint

        class_count = read_checkpoint(teacher_checkpoint)["class_count"]

    out_dir = Path(out_dir)
    entries = []
    for a in sorted(unique):
        torch.manual_seed(cfg.seed)
        handle = build_detector(architecture_id, class_count, image_size=image_size)
        result = train_student(
            train_triplets,
            val_triplets,
            teacher_checkpoint,
            handle,
            a,
            cfg,
            out_dir / f"alpha_{a:g}",
            preprocess_cfg=preprocess_cfg,
        )
        entries.append(SweepEntry(alpha=a, result=result))
    return entries
