"""Core data model: boxes, labeled objects, per-image object sets, training triplets.

Images are numpy arrays: RGB images are float32 (H, W, 3) in [0, 1] after
loading; privileged rasters are uint8 (H, W). Box coordinates live in the
continuous pixel frame of their image, corner form (x_min, y_min, x_max, y_max).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if min(coords) < 0:
            raise ValueError(f"box coordinates must be >= 0, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h


@dataclass(frozen=True)
class LabeledObject:
    box: BoundingBox
    label: int
    score: Optional[float] = None  # present only on predictions

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass
class ObjectSet:
    """Ordered objects of one image; doubles as annotation and prediction set."""

    objects: list[LabeledObject] = field(default_factory=list)
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)


@dataclass
class DatasetTriplet:
    """One training sample: image, optional privileged raster, ground truth."""

    image: np.ndarray                      # float32 (H, W, 3) in [0, 1]
    truth: ObjectSet
    privileged: Optional[np.ndarray] = None  # uint8 (H, W), same H x W as image

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.privileged is not None:
            if self.privileged.shape != self.image.shape[:2]:
                raise ValueError(
                    f"privileged raster {self.privileged.shape} does not match "
                    f"image {self.image.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def image_id(self) -> str:
        return self.truth.image_id


@dataclass
class PreprocessConfig:
    """Resize + normalization settings applied before the model sees a sample.

    channel_stats, when given, holds dataset-global (mean, std) per channel and
    replaces the default per-image statistics during standardization. Length
    must cover the privileged channel when one is stacked (3 or 4 entries).
    """

    target_size: int = 800
    min_max_scale: bool = True
    standardize: bool = True
    channel_stats: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError(f"target_size must be > 0, got {self.target_size}")


def clip_box_to_bounds(box: BoundingBox, width: float, height: float) -> Optional[BoundingBox]:
    """Clip a box to [0, width] x [0, height]; None if nothing remains."""
    x0 = max(box.x_min, 0.0)
    y0 = max(box.y_min, 0.0)
    x1 = min(box.x_max, float(width))
    y1 = min(box.y_max, float(height))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBox(x0, y0, x1, y1)
