"""Privileged-information rasters: class-coded bounding-box masks, ingestion of
precomputed saliency/depth rasters, and their pixelwise fusion.

A mask is a black (0) background with each annotated box filled at a grayscale
intensity coding its class. Boxes are painted in descending area order so that
smaller boxes overwrite larger ones; pixel coverage is the half-open rectangle
[floor(x_min), ceil(x_max)) x [floor(y_min), ceil(y_max)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .types import ObjectSet

logger = logging.getLogger(__name__)

MASK_SUFFIX = ".mask.png"


def _round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def default_intensity_map(class_count: int) -> dict[int, int]:
    """Map class c to round(255 * (c+1) / C): injective, background 0 reserved,
    top class saturates at 255. Requires 1 <= C <= 255."""
    if not 1 <= class_count <= 255:
        raise ValueError(
            f"class_count must be in [1, 255] for 8-bit intensities, got {class_count}"
        )
    return {c: int(_round_half_up(255.0 * (c + 1) / class_count)) for c in range(class_count)}


@dataclass
class MaskSpec:
    """Intensity coding for bounding-box masks."""

    class_count: int
    intensity_map: dict[int, int] = field(default_factory=dict)
    background_value: int = 0

    def __post_init__(self):
        if not self.intensity_map:
            self.intensity_map = default_intensity_map(self.class_count)
        values = list(self.intensity_map.values())
        if len(set(values)) != len(values):
            raise ValueError("intensity_map must be injective")
        if any(v < 1 or v > 255 for v in values):
            raise ValueError("intensity values must be in [1, 255] (0 is background)")


@dataclass
class FusionSpec:
    """Convex-combination weights over an ordered list of raster roles."""

    weights: tuple[float, ...]
    sources: tuple[str, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.sources):
            raise ValueError("weights and sources must have equal length")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")


def render_bbox_mask(truth: ObjectSet, height: int, width: int, spec: MaskSpec) -> np.ndarray:
    """Paint ground-truth boxes into a uint8 (height, width) raster.

    Paint order is strictly descending box area, so smaller boxes overwrite
    larger ones; equal-area ties are broken by listing order (later wins). An
    empty ObjectSet yields an all-zero raster.
    """
    mask = np.full((height, width), spec.background_value, dtype=np.uint8)
    # sort: biggest first; equal areas keep listing order so the later one paints last
    order = sorted(range(len(truth.objects)), key=lambda i: (-truth.objects[i].box.area, i))
    for i in order:
        obj = truth.objects[i]
        if obj.label not in spec.intensity_map:
            raise ValueError(f"label {obj.label} has no intensity mapping")
        x0 = max(math.floor(obj.box.x_min), 0)
        y0 = max(math.floor(obj.box.y_min), 0)
        x1 = min(math.ceil(obj.box.x_max), width)
        y1 = min(math.ceil(obj.box.y_max), height)
        mask[y0:y1, x0:x1] = spec.intensity_map[obj.label]
    return mask


def ingest_raster(path: Path | str, expected_size: tuple[int, int]) -> np.ndarray:
    """Load a single-channel 8-bit raster, resizing (bilinear) on size mismatch.

    Multi-channel files are rejected; a resize is announced with a warning.
    """
    path = Path(path)
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected single-channel 8-bit image, got mode '{im.mode}'")
        h, w = expected_size
        if im.size != (w, h):
            logger.warning("resizing raster %s from %s to %s", path, im.size, (w, h))
            im = im.resize((w, h), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def fuse(rasters: list[np.ndarray], spec: FusionSpec) -> np.ndarray:
    """Pixelwise convex combination of same-size rasters, rounded half-up to 8-bit."""
    if len(rasters) != len(spec.sources):
        raise ValueError(f"got {len(rasters)} rasters for {len(spec.sources)} sources")
    shape = rasters[0].shape
    for r in rasters[1:]:
        if r.shape != shape:
            raise ValueError(f"raster size mismatch: {r.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for w, r in zip(spec.weights, rasters):
        acc += w * r.astype(np.float64)
    return np.clip(_round_half_up(acc), 0, 255).astype(np.uint8)


def mask_path(image_id: str, mask_dir: Path | str) -> Path:
    return Path(mask_dir) / f"{image_id}{MASK_SUFFIX}"


def save_mask(mask: np.ndarray, image_id: str, mask_dir: Path | str) -> Path:
    path = mask_path(image_id, mask_dir)
    Image.fromarray(mask, mode="L").save(path)
    return path
