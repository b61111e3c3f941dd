"""Inference over prepared triplets: preprocess, forward, suppress, report.

Evaluation happens in the preprocessed frame (the target_size x target_size
grid), matching the frame used for scale buckets.
"""

from __future__ import annotations

from typing import Optional

import torch

from .data import preprocess
from .detectors import DetectorHandle, forward_with_tap, nms
from .metrics import EvalReport, coco_report
from .types import DatasetTriplet, ObjectSet, PreprocessConfig


def run_inference(
    handle: DetectorHandle,
    triplets: list[DatasetTriplet],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    batch_size: int = 8,
    use_privileged: bool = False,
) -> tuple[list[ObjectSet], list[ObjectSet]]:
    """Detections and ground truths per image, both in the preprocessed frame.

    use_privileged stacks the privileged raster as a fourth input channel
    (teacher evaluation); detections are class-aware NMS-suppressed and capped.
    """
    cfg = preprocess_cfg or PreprocessConfig()
    samples = [preprocess(t, cfg) for t in triplets]
    if use_privileged and any(s.privileged is None for s in samples):
        raise ValueError("use_privileged requires a privileged raster on every triplet")

    detections: list[ObjectSet] = []
    truths: list[ObjectSet] = []
    handle.model.eval()
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            images = torch.stack(
                [s.model_input if use_privileged else s.image for s in chunk]
            )
            outputs, _ = forward_with_tap(handle, images)
            for sample, obj_set in zip(chunk, outputs):
                obj_set.image_id = sample.image_id
                kept = nms(obj_set, nms_iou)
                kept.objects = kept.objects[:max_detections]
                detections.append(kept)
                truths.append(sample.truth)
    return detections, truths


def evaluate_detector(
    handle: DetectorHandle,
    triplets: list[DatasetTriplet],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    batch_size: int = 8,
    use_privileged: bool = False,
) -> EvalReport:
    detections, truths = run_inference(
        handle,
        triplets,
        preprocess_cfg=preprocess_cfg,
        nms_iou=nms_iou,
        max_detections=max_detections,
        batch_size=batch_size,
        use_privileged=use_privileged,
    )
    return coco_report(detections, truths, handle.class_count)
