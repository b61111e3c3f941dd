"""COCO-style detection metrics plus classical precision/recall/F1.

Pinned conventions, shared with the brute-force oracle in the test suite:
  - IoU thresholds 0.50:0.05:0.95; average precision by 101-point interpolation.
  - Matching is greedy per image: detections in (-score, index) order each claim
    the unclaimed same-class ground truth with the highest IoU >= threshold
    (IoU ties broken by lowest ground-truth index).
  - The dataset-level precision/recall curve orders detections by
    (-score, image index, detection index).
  - mAR@k caps detections per image (across classes) at the k highest scores.
  - Scale buckets by object pixel area in the evaluation frame: small < 32^2,
    medium 32^2..96^2 inclusive, large > 96^2; both ground truths and
    detections are bucketed by their own area.
  - Empty buckets and classes absent from the ground truth report the sentinel
    -1 and are excluded from means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .types import BoundingBox, ObjectSet

IOU_THRESHOLDS: tuple[float, ...] = tuple(np.linspace(0.5, 0.95, 10).tolist())
SMALL_MAX_AREA = 32.0**2
MEDIUM_MAX_AREA = 96.0**2
SENTINEL = -1.0

RADAR_METRICS = (
    "map_50_95",
    "map_50",
    "map_75",
    "mar_1",
    "mar_10",
    "mar_100",
    "precision",
    "recall",
    "f1",
)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchResult:
    """Per-image greedy matching outcome across IoU thresholds.

    Arrays are indexed by original detection / ground-truth positions;
    det_order lists detection indices in the (-score, index) matching order.
    """

    thresholds: tuple[float, ...]
    det_order: np.ndarray       # (D,)
    det_tp: np.ndarray          # (T, D) bool
    det_matched_gt: np.ndarray  # (T, D) int, -1 when unmatched
    gt_matched: np.ndarray      # (T, G) bool


def match(
    detections: ObjectSet, truths: ObjectSet, iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS
) -> MatchResult:
    dets = detections.objects
    gts = truths.objects
    for d in dets:
        if d.score is None:
            raise ValueError("match requires scored detections")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    n_t = len(iou_thresholds)
    det_tp = np.zeros((n_t, len(dets)), dtype=bool)
    det_matched = np.full((n_t, len(dets)), -1, dtype=int)
    gt_matched = np.zeros((n_t, len(gts)), dtype=bool)

    pair_iou = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if d.label == g.label:
                pair_iou[i, j] = iou(d.box, g.box)

    for ti, t in enumerate(iou_thresholds):
        for i in order:
            best_j, best_iou = -1, 0.0
            for j, g in enumerate(gts):
                if gt_matched[ti, j] or g.label != dets[i].label:
                    continue
                v = pair_iou[i, j]
                if v >= t and v > best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0:
                det_tp[ti, i] = True
                det_matched[ti, i] = best_j
                gt_matched[ti, best_j] = True
    return MatchResult(
        thresholds=tuple(iou_thresholds),
        det_order=np.asarray(order, dtype=int),
        det_tp=det_tp,
        det_matched_gt=det_matched,
        gt_matched=gt_matched,
    )


def interpolated_average_precision(scores, tps, n_gt, image_ids=None, det_ids=None) -> float:
    """101-point interpolated AP from dataset-level (score, tp) pairs.

    Sentinel -1 when the class never occurs in the ground truth.
    """
    if n_gt == 0:
        return SENTINEL
    scores = np.asarray(scores, dtype=float)
    tps = np.asarray(tps, dtype=bool)
    if scores.size == 0:
        return 0.0
    image_ids = np.zeros_like(scores) if image_ids is None else np.asarray(image_ids)
    det_ids = np.arange(scores.size) if det_ids is None else np.asarray(det_ids)
    order = np.lexsort((det_ids, image_ids, -scores))
    tp_cum = np.cumsum(tps[order])
    ranks = np.arange(1, scores.size + 1)
    precisions = tp_cum / ranks
    recalls = tp_cum / n_gt
    # precision envelope: max precision at any recall >= r
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def average_precision(
    detections_per_image: list[ObjectSet],
    truths_per_image: list[ObjectSet],
    label: int,
    threshold: float,
) -> float:
    """Dataset AP for one class at one IoU threshold."""
    per_class = _accumulate(detections_per_image, truths_per_image, (threshold,), None)
    if label not in per_class:
        return SENTINEL
    scores, tps, img_ids, det_ids, n_gt = per_class[label]
    return interpolated_average_precision(scores, tps[0], n_gt, img_ids, det_ids)


def _cap_detections(obj_set: ObjectSet, k: Optional[int]) -> ObjectSet:
    if k is None or len(obj_set.objects) <= k:
        return obj_set
    order = sorted(range(len(obj_set.objects)), key=lambda i: (-obj_set.objects[i].score, i))
    keep = sorted(order[:k])
    return ObjectSet(objects=[obj_set.objects[i] for i in keep], image_id=obj_set.image_id)


def _accumulate(dets_per_img, gts_per_img, thresholds, max_dets):
    """Per class: (scores, tp-per-threshold, image ids, det ids, gt count)."""
    labels = set()
    for s in list(dets_per_img) + list(gts_per_img):
        labels.update(o.label for o in s.objects)
    acc = {
        label: {"scores": [], "tps": [[] for _ in thresholds], "img": [], "det": [], "n_gt": 0}
        for label in labels
    }
    for img_idx, (dets, gts) in enumerate(zip(dets_per_img, gts_per_img)):
        capped = _cap_detections(dets, max_dets)
        result = match(capped, gts, thresholds)
        for g in gts.objects:
            acc[g.label]["n_gt"] += 1
        for det_idx, d in enumerate(capped.objects):
            a = acc[d.label]
            a["scores"].append(d.score)
            a["img"].append(img_idx)
            a["det"].append(det_idx)
            for ti in range(len(thresholds)):
                a["tps"][ti].append(bool(result.det_tp[ti, det_idx]))
    return {
        label: (
            np.asarray(a["scores"], dtype=float),
            [np.asarray(t, dtype=bool) for t in a["tps"]],
            np.asarray(a["img"], dtype=int),
            np.asarray(a["det"], dtype=int),
            a["n_gt"],
        )
        for label, a in acc.items()
    }


def _mean_ap(dets_per_img, gts_per_img, thresholds, class_count, max_dets=None):
    """(mean AP over classes with ground truth, per-class AP list)."""
    acc = _accumulate(dets_per_img, gts_per_img, thresholds, max_dets)
    per_class = []
    for label in range(class_count):
        if label not in acc or acc[label][4] == 0:
            per_class.append(SENTINEL)
            continue
        scores, tps, img_ids, det_ids, n_gt = acc[label]
        aps = [
            interpolated_average_precision(scores, tps[ti], n_gt, img_ids, det_ids)
            for ti in range(len(thresholds))
        ]
        per_class.append(float(np.mean(aps)))
    valid = [v for v in per_class if v != SENTINEL]
    return (float(np.mean(valid)) if valid else SENTINEL), per_class


def _mean_recall(dets_per_img, gts_per_img, thresholds, class_count, max_dets):
    """mAR: recall averaged over IoU thresholds, then over classes with GT."""
    acc = _accumulate(dets_per_img, gts_per_img, thresholds, max_dets)
    per_class = []
    for label in range(class_count):
        if label not in acc or acc[label][4] == 0:
            continue
        _, tps, _, _, n_gt = acc[label]
        per_class.append(float(np.mean([tps[ti].sum() / n_gt for ti in range(len(thresholds))])))
    return float(np.mean(per_class)) if per_class else SENTINEL


BUCKET_NAMES = ("small", "medium", "large")


def bucket_of(area: float) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def _bucket(obj_set: ObjectSet, name: str) -> ObjectSet:
    return ObjectSet(
        objects=[o for o in obj_set.objects if bucket_of(o.box.area) == name],
        image_id=obj_set.image_id,
    )


def _prf(dets_per_img, gts_per_img, score_threshold=0.5, iou_threshold=0.5):
    """Micro-averaged precision/recall/F1 at one operating point."""
    tp = fp = n_gt = 0
    for dets, gts in zip(dets_per_img, gts_per_img):
        confident = ObjectSet(
            objects=[d for d in dets.objects if d.score >= score_threshold],
            image_id=dets.image_id,
        )
        result = match(confident, gts, (iou_threshold,))
        tp += int(result.det_tp[0].sum())
        fp += len(confident.objects) - int(result.det_tp[0].sum())
        n_gt += len(gts.objects)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / n_gt if n_gt > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    map_50_95: float
    map_50: float
    map_75: float
    map_small: float
    map_medium: float
    map_large: float
    mar_1: float
    mar_10: float
    mar_100: float
    mar_small: float
    mar_medium: float
    mar_large: float
    precision: float
    recall: float
    f1: float
    per_class_ap: list[float] = field(default_factory=list)
    n_images: int = 0
    n_objects: int = 0
    bucket_counts: dict[str, int] = field(default_factory=dict)

    SCALARS = (
        "map_50_95",
        "map_50",
        "map_75",
        "map_small",
        "map_medium",
        "map_large",
        "mar_1",
        "mar_10",
        "mar_100",
        "mar_small",
        "mar_medium",
        "mar_large",
        "precision",
        "recall",
        "f1",
    )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def csv_row(self) -> list:
        return [getattr(self, name) for name in self.SCALARS]

    def formatted(self, decimals: int = 2) -> str:
        """Console table; empty buckets render as a dash."""
        cells = [
            f"{name}={'-' if getattr(self, name) == SENTINEL else format(getattr(self, name), f'.{decimals}f')}"
            for name in self.SCALARS
        ]
        return "  ".join(cells)


def coco_report(
    detections_per_image: list[ObjectSet],
    truths_per_image: list[ObjectSet],
    class_count: int,
) -> EvalReport:
    """Full metric bundle over one evaluated split.

    All images must share the same preprocessing frame; bucket areas are
    measured in that frame.
    """
    if len(detections_per_image) != len(truths_per_image):
        raise ValueError("detections and truths must align per image")
    dets, gts = list(detections_per_image), list(truths_per_image)

    map_50_95, per_class = _mean_ap(dets, gts, IOU_THRESHOLDS, class_count)
    map_50, _ = _mean_ap(dets, gts, (0.5,), class_count)
    map_75, _ = _mean_ap(dets, gts, (0.75,), class_count)

    bucket_map, bucket_mar, bucket_counts = {}, {}, {}
    for name in BUCKET_NAMES:
        b_dets = [_bucket(s, name) for s in dets]
        b_gts = [_bucket(s, name) for s in gts]
        bucket_map[name], _ = _mean_ap(b_dets, b_gts, IOU_THRESHOLDS, class_count)
        bucket_mar[name] = _mean_recall(b_dets, b_gts, IOU_THRESHOLDS, class_count, 100)
        bucket_counts[name] = sum(len(s.objects) for s in b_gts)

    precision, recall, f1 = _prf(dets, gts)
    return EvalReport(
        map_50_95=map_50_95,
        map_50=map_50,
        map_75=map_75,
        map_small=bucket_map["small"],
        map_medium=bucket_map["medium"],
        map_large=bucket_map["large"],
        mar_1=_mean_recall(dets, gts, IOU_THRESHOLDS, class_count, 1),
        mar_10=_mean_recall(dets, gts, IOU_THRESHOLDS, class_count, 10),
        mar_100=_mean_recall(dets, gts, IOU_THRESHOLDS, class_count, 100),
        mar_small=bucket_mar["small"],
        mar_medium=bucket_mar["medium"],
        mar_large=bucket_mar["large"],
        precision=precision,
        recall=recall,
        f1=f1,
        per_class_ap=per_class,
        n_images=len(gts),
        n_objects=sum(len(s.objects) for s in gts),
        bucket_counts=bucket_counts,
    )


def compare_runs(reports: dict[str, EvalReport]) -> dict:
    """Aligned comparison across runs plus radar-plot-ready rows.

    Returns {"rows", "radar", "best"}: one table row per run, one radar entry
    per (run, metric), and the run label with the best strict mAP.
    """
    if not reports:
        raise ValueError("compare_runs needs at least one report")
    rows = [{"run": label, **dict(zip(EvalReport.SCALARS, r.csv_row()))} for label, r in reports.items()]
    radar = [
        {"run": label, "metric": m, "value": getattr(r, m)}
        for label, r in reports.items()
        for m in RADAR_METRICS
    ]
    best = max(reports, key=lambda k: reports[k].map_50_95)
    return {"rows": rows, "radar": radar, "best": best}


def write_comparison_csv(comparison: dict, table_path: Path | str, radar_path: Path | str) -> None:
    table_path, radar_path = Path(table_path), Path(radar_path)
    with open(table_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run", *EvalReport.SCALARS])
        writer.writeheader()
        writer.writerows(comparison["rows"])
    with open(radar_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run", "metric", "value"])
        writer.writeheader()
        writer.writerows(comparison["radar"])
