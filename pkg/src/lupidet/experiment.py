"""Desk-scale directional experiment: teacher vs baseline vs alpha-swept
students on the synthetic suite, reporting test mAP@50 per run.

One experiment trains, per seed, a 4-channel teacher, an RGB baseline, and one
student per nonzero alpha (alpha 0 is the baseline by construction), then
evaluates every best checkpoint on the held-out test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .detectors import build_detector, extend_input_channels, load_detector
from .inference import evaluate_detector
from .masks import MaskSpec, render_bbox_mask
from .metrics import EvalReport
from .synthetic import make_acceptance_suite
from .training import TrainConfig, train_baseline, train_student, train_teacher
from .types import DatasetTriplet, PreprocessConfig


def attach_masks(triplets: list[DatasetTriplet], class_count: int) -> list[DatasetTriplet]:
    """Render the class-coded box mask of every triplet as its privileged raster."""
    spec = MaskSpec(class_count=class_count)
    return [
        DatasetTriplet(
            image=t.image,
            truth=t.truth,
            privileged=render_bbox_mask(t.truth, t.height, t.width, spec),
        )
        for t in triplets
    ]


@dataclass
class SeedOutcome:
    seed: int
    teacher: EvalReport
    baseline: EvalReport
    students: dict[float, EvalReport] = field(default_factory=dict)


@dataclass
class DeskExperimentResult:
    outcomes: list[SeedOutcome]
    alphas: tuple[float, ...]

    def mean_map50(self, role: str, alpha: Optional[float] = None) -> float:
        if role == "teacher":
            values = [o.teacher.map_50 for o in self.outcomes]
        elif role == "baseline":
            values = [o.baseline.map_50 for o in self.outcomes]
        else:
            values = [o.students[alpha].map_50 for o in self.outcomes]
        return float(np.mean(values))

    def student_means(self) -> dict[float, float]:
        out = {}
        for alpha in self.alphas:
            if alpha == 0.0:
                out[alpha] = self.mean_map50("baseline")
            else:
                out[alpha] = self.mean_map50("student", alpha)
        return out

    def best_alpha(self) -> float:
        means = self.student_means()
        return max(means, key=lambda a: means[a])


def run_desk_experiment(
    out_dir: Path | str,
    seeds: tuple[int, ...] = (1, 2, 3),
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
    epochs: int = 20,
    image_size: int = 64,
    class_count: int = 3,
    progress: Optional[Callable[[str], None]] = print,
) -> DeskExperimentResult:
    out_dir = Path(out_dir)
    pcfg = PreprocessConfig(target_size=image_size)
    say = progress or (lambda message: None)
    outcomes = []
    for seed in seeds:
        start = time.time()
        train, val, test = (
            attach_masks(split, class_count)
            for split in make_acceptance_suite(seed, image_size=image_size)
        )
        cfg = TrainConfig(epochs=epochs, batch_size=8, seed=seed, early_stop_patience=10)
        seed_dir = out_dir / f"seed{seed}"

        torch.manual_seed(seed)
        teacher = extend_input_channels(build_detector("tiny", class_count, image_size=image_size))
        teacher_run = train_teacher(train, val, teacher, cfg, seed_dir / "teacher",
                                    preprocess_cfg=pcfg)
        teacher_report = evaluate_detector(
            load_detector(teacher_run.checkpoint_path), test,
            preprocess_cfg=pcfg, use_privileged=True,
        )
        say(f"seed {seed}: teacher mAP@50={teacher_report.map_50:.3f}")

        torch.manual_seed(seed)
        baseline = build_detector("tiny", class_count, image_size=image_size)
        baseline_run = train_baseline(train, val, baseline, cfg, seed_dir / "baseline",
                                      preprocess_cfg=pcfg)
        baseline_report = evaluate_detector(
            load_detector(baseline_run.checkpoint_path), test, preprocess_cfg=pcfg
        )
        say(f"seed {seed}: baseline mAP@50={baseline_report.map_50:.3f}")

        outcome = SeedOutcome(seed=seed, teacher=teacher_report, baseline=baseline_report)
        for alpha in alphas:
            if alpha == 0.0:
                continue  # the baseline run is the alpha = 0 student (twin-run identity)
            torch.manual_seed(seed)
            student = build_detector("tiny", class_count, image_size=image_size)
            student_run = train_student(
                train, val, teacher_run.checkpoint_path, student, alpha, cfg,
                seed_dir / f"student_a{alpha:g}", preprocess_cfg=pcfg,
            )
            outcome.students[alpha] = evaluate_detector(
                load_detector(student_run.checkpoint_path), test, preprocess_cfg=pcfg
            )
            say(f"seed {seed}: student alpha={alpha:g} mAP@50={outcome.students[alpha].map_50:.3f}")
        outcomes.append(outcome)
        say(f"seed {seed}: done in {time.time() - start:.0f}s")
    return DeskExperimentResult(outcomes=outcomes, alphas=tuple(alphas))
