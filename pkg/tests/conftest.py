from __future__ import annotations

import numpy as np
import pytest
import torch

from lupidet.detectors import build_detector
from lupidet.synthetic import NoiseParams, SceneSpec, generate
from lupidet.training import TrainConfig, train_baseline
from lupidet.types import BoundingBox, LabeledObject, ObjectSet, PreprocessConfig


def random_object_set(rng: np.random.Generator, frame: float, n_max: int, class_count: int,
                      scored: bool) -> ObjectSet:
    objects = []
    for _ in range(rng.integers(0, n_max + 1)):
        x0, y0 = rng.uniform(0, frame * 0.8, size=2)
        w, h = rng.uniform(2.0, frame * 0.5, size=2)
        objects.append(
            LabeledObject(
                box=BoundingBox(x0, y0, min(x0 + w, frame), min(y0 + h, frame)),
                label=int(rng.integers(0, class_count)),
                score=float(np.round(rng.uniform(0.05, 1.0), 3)) if scored else None,
            )
        )
    return ObjectSet(objects=objects)


def random_micro_dataset(rng: np.random.Generator, n_images=4, class_count=3, frame=200.0):
    """Paired detection/ground-truth sets: some detections are jittered copies
    of ground truths (plausible matches), some are spurious."""
    dets, gts = [], []
    for _ in range(n_images):
        truth = random_object_set(rng, frame, 6, class_count, scored=False)
        gts.append(truth)
        objects = []
        for g in truth.objects:
            if rng.random() < 0.8:  # jittered copy of a truth box
                jitter = rng.uniform(-8.0, 8.0, size=4)
                x0 = min(max(g.box.x_min + jitter[0], 0.0), frame - 2)
                y0 = min(max(g.box.y_min + jitter[1], 0.0), frame - 2)
                x1 = min(max(g.box.x_max + jitter[2], x0 + 1.0), frame)
                y1 = min(max(g.box.y_max + jitter[3], y0 + 1.0), frame)
                label = g.label if rng.random() < 0.9 else int(rng.integers(0, class_count))
                objects.append(
                    LabeledObject(
                        box=BoundingBox(x0, y0, x1, y1),
                        label=label,
                        score=float(np.round(rng.uniform(0.05, 1.0), 3)),
                    )
                )
        spurious = random_object_set(rng, frame, 3, class_count, scored=True)
        objects.extend(spurious.objects)
        dets.append(ObjectSet(objects=objects))
    return dets, gts


@pytest.fixture(scope="session")
def easy_scene_spec():
    """High-contrast scenes a tiny detector can learn in a few epochs."""
    return SceneSpec(
        image_size=64,
        objects_per_image=(1, 2),
        distractors_per_image=(0, 0),
        size_range=(16, 26),
        object_contrast=(0.3, 0.5),
        background=NoiseParams(coarse_amp=0.04, fine_amp=0.02),
        seed=77,
    )


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory, easy_scene_spec):
    """A tiny detector trained well enough for heatmap/argmax assertions."""
    train = generate(easy_scene_spec, 48, id_prefix="easy")
    val = generate(
        SceneSpec(**{**easy_scene_spec.__dict__, "seed": 78}), 8, id_prefix="easyval"
    )
    torch.manual_seed(0)
    handle = build_detector("tiny", class_count=3, image_size=64)
    cfg = TrainConfig(epochs=12, batch_size=8, seed=0, early_stop_patience=12)
    result = train_baseline(
        train, val, handle, cfg,
        tmp_path_factory.mktemp("trained_tiny"),
        preprocess_cfg=PreprocessConfig(target_size=64),
    )
    return handle, train, result
