"""Dataset ingestion, tiling, preprocessing, and deterministic splitting.

Ingestion accepts COCO-format JSON or VOC-format XML, remaps labels to a
contiguous [0, C-1] range, clips boxes to image bounds, and drops degenerate
boxes with a logged warning. All operations here are pure functions of their
inputs and safe to run on many samples in parallel.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .types import (
    BoundingBox,
    DatasetTriplet,
    LabeledObject,
    ObjectSet,
    PreprocessConfig,
    clip_box_to_bounds,
)

logger = logging.getLogger(__name__)

# Fraction of a box's original area that must survive clipping to a tile for
# the box to be kept in that tile.
TILE_KEEP_FRACTION = 0.2


class DatasetError(Exception):
    """Raised on malformed annotations or missing inputs."""


@dataclass
class IngestResult:
    """Triplets plus the sidecar label map (original id -> contiguous index)."""

    triplets: list[DatasetTriplet]
    label_map: dict
    class_names: list[str]
    dropped_boxes: int = 0

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    @property
    def class_count(self) -> int:
        return len(self.label_map)


def load_image(path: Path) -> np.ndarray:
    """Load an 8-bit image file as float32 (H, W, 3) in [0, 1]."""
    if not path.exists():
        raise DatasetError(f"image file not found: {path}")
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def _ingest_objects(raw_boxes, width, height, image_id):
    """Clip corner-form (box, label) pairs to image bounds; count drops."""
    objects = []
    dropped = 0
    for (x0, y0, x1, y1), label in raw_boxes:
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            logger.warning("dropping degenerate box %s in image %s", (x0, y0, x1, y1), image_id)
            dropped += 1
            continue
        clipped = clip_box_to_bounds(
            BoundingBox(max(x0, 0.0), max(y0, 0.0), max(x1, 0.0), max(y1, 0.0)), width, height
        )
        if clipped is None:
            logger.warning("dropping fully out-of-bounds box in image %s", image_id)
            dropped += 1
            continue
        objects.append(LabeledObject(box=clipped, label=label))
    return objects, dropped


def ingest_coco(annotation_file: Path | str, image_root: Path | str) -> IngestResult:
    """Read a COCO-format annotation file into triplets (privileged absent).

    Boxes are converted from (x, y, w, h) to corner form and category ids are
    remapped to contiguous [0, C-1] by ascending original id. Degenerate boxes
    (w <= 0 or h <= 0) are dropped with a warning; a missing image file is an
    error.
    """
    annotation_file = Path(annotation_file)
    image_root = Path(image_root)
    try:
        with open(annotation_file) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed COCO JSON in {annotation_file}: {e}") from e

    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetError(f"COCO annotation missing required field '{key}'")

    categories = sorted(doc["categories"], key=lambda c: c["id"])
    label_map = {c["id"]: i for i, c in enumerate(categories)}
    class_names = [str(c.get("name", c["id"])) for c in categories]

    anns_by_image: dict = {}
    for ann in doc["annotations"]:
        try:
            image_id = ann["image_id"]
            x, y, w, h = map(float, ann["bbox"][:4])
            cat = ann["category_id"]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed annotation entry {ann!r}: field {e}") from e
        if cat not in label_map:
            raise DatasetError(f"annotation references unknown category_id {cat}")
        anns_by_image.setdefault(image_id, []).append(((x, y, x + w, y + h), label_map[cat]))

    triplets = []
    dropped = 0
    for info in doc["images"]:
        try:
            image_id = info["id"]
            file_name = info["file_name"]
        except KeyError as e:
            raise DatasetError(f"malformed image entry {info!r}: missing field {e}") from e
        image = load_image(image_root / file_name)
        h, w = image.shape[:2]
        objects, n_dropped = _ingest_objects(anns_by_image.get(image_id, []), w, h, image_id)
        dropped += n_dropped
        triplets.append(
            DatasetTriplet(image=image, truth=ObjectSet(objects=objects, image_id=str(image_id)))
        )
    if dropped:
        logger.warning("ingest_coco dropped %d degenerate boxes", dropped)
    return IngestResult(triplets, label_map, class_names, dropped)


def ingest_voc(
    xml_dir: Path | str, image_root: Path | str, class_names: Sequence[str]
) -> IngestResult:
    """Read a directory of VOC-format detection XMLs into triplets.

    Labels are indexed by position in class_names; an object naming an unknown
    class is an error. VOC's 1-based inclusive pixel convention is converted to
    0-based corner coordinates.
    """
    xml_dir = Path(xml_dir)
    image_root = Path(image_root)
    class_index = {name: i for i, name in enumerate(class_names)}

    triplets = []
    dropped = 0
    for xml_path in sorted(xml_dir.glob("*.xml")):
        root = ET.parse(xml_path).getroot()
        size = root.find("size")
        if size is None or size.find("width") is None or size.find("height") is None:
            raise DatasetError(f"{xml_path}: missing size element")
        filename_el = root.find("filename")
        file_name = filename_el.text if filename_el is not None else xml_path.stem + ".jpg"
        image = load_image(image_root / file_name)
        h, w = image.shape[:2]

        raw = []
        for obj in root.findall("object"):
            name = obj.findtext("name")
            if name not in class_index:
                raise DatasetError(f"{xml_path}: unknown class name '{name}'")
            bnd = obj.find("bndbox")
            if bnd is None:
                raise DatasetError(f"{xml_path}: object without bndbox")
            # 1-based inclusive -> 0-based half-open corners
            x0 = float(bnd.findtext("xmin")) - 1.0
            y0 = float(bnd.findtext("ymin")) - 1.0
            x1 = float(bnd.findtext("xmax"))
            y1 = float(bnd.findtext("ymax"))
            raw.append(((x0, y0, x1, y1), class_index[name]))

        objects, n_dropped = _ingest_objects(raw, w, h, xml_path.stem)
        dropped += n_dropped
        triplets.append(
            DatasetTriplet(image=image, truth=ObjectSet(objects=objects, image_id=xml_path.stem))
        )
    label_map = {name: i for name, i in class_index.items()}
    return IngestResult(triplets, label_map, list(class_names), dropped)


def tile_bounds(height: int, width: int, grid: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    """Row-major (x0, y0, x1, y1) tile rectangles; last row/col absorb remainders."""
    rows, cols = grid
    base_h, base_w = height // rows, width // cols
    rects = []
    for r in range(rows):
        y0 = r * base_h
        y1 = (r + 1) * base_h if r < rows - 1 else height
        for c in range(cols):
            x0 = c * base_w
            x1 = (c + 1) * base_w if c < cols - 1 else width
            rects.append((x0, y0, x1, y1))
    return rects


def tile(triplet: DatasetTriplet, grid: tuple[int, int]) -> list[DatasetTriplet]:
    """Split a triplet into a rows x cols grid of child triplets.

    Each ground-truth box is assigned to every tile it overlaps, clipped to the
    tile and shifted into the tile frame; clipped boxes retaining less than
    TILE_KEEP_FRACTION of their original area are dropped from that tile. The
    privileged raster, when present, is sliced identically. A 1x1 grid returns
    the input unchanged.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be >= 1 in both axes, got {grid}")
    if (rows, cols) == (1, 1):
        return [triplet]

    children = []
    for idx, (x0, y0, x1, y1) in enumerate(tile_bounds(triplet.height, triplet.width, grid)):
        r, c = divmod(idx, cols)
        tile_box = BoundingBox(float(x0), float(y0), float(x1), float(y1))
        objects = []
        for obj in triplet.truth:
            inter = obj.box.intersection_area(tile_box)
            if inter < TILE_KEEP_FRACTION * obj.box.area or inter <= 0:
                continue
            clipped = BoundingBox(
                max(obj.box.x_min, tile_box.x_min) - x0,
                max(obj.box.y_min, tile_box.y_min) - y0,
                min(obj.box.x_max, tile_box.x_max) - x0,
                min(obj.box.y_max, tile_box.y_max) - y0,
            )
            objects.append(LabeledObject(box=clipped, label=obj.label, score=obj.score))
        child_id = f"{triplet.image_id}_r{r}c{c}"
        children.append(
            DatasetTriplet(
                image=triplet.image[y0:y1, x0:x1],
                truth=ObjectSet(objects=objects, image_id=child_id),
                privileged=None
                if triplet.privileged is None
                else triplet.privileged[y0:y1, x0:x1],
            )
        )
    return children


@dataclass(frozen=True)
class BoxTransform:
    """Forward/inverse coordinate mapping recorded by preprocess."""

    scale_x: float
    scale_y: float

    def apply(self, box: BoundingBox) -> BoundingBox:
        return box.scaled(self.scale_x, self.scale_y)

    def invert(self, box: BoundingBox) -> BoundingBox:
        return box.scaled(1.0 / self.scale_x, 1.0 / self.scale_y)


@dataclass
class PreprocessedSample:
    """Model-ready tensors plus the scaled ground truth for one triplet."""

    image: torch.Tensor                     # (3, S, S) float32
    privileged: Optional[torch.Tensor]      # (1, S, S) float32 or None
    truth: ObjectSet                        # boxes in the S x S frame
    transform: BoxTransform
    image_id: str

    @property
    def model_input(self) -> torch.Tensor:
        """Stacked (3 or 4, S, S) input: RGB plus privileged channel if present."""
        if self.privileged is None:
            return self.image
        return torch.cat([self.image, self.privileged], dim=0)


def _min_max_per_channel(x: np.ndarray) -> np.ndarray:
    """Scale each channel of (C, H, W) to [0, 1]; constant channels map to 0."""
    out = np.zeros_like(x)
    for c in range(x.shape[0]):
        lo, hi = x[c].min(), x[c].max()
        if hi > lo:
            out[c] = (x[c] - lo) / (hi - lo)
    return out


def preprocess(triplet: DatasetTriplet, cfg: PreprocessConfig) -> PreprocessedSample:
    """Min-max scale per channel, resize to target_size, standardize per channel.

    The privileged raster, when present, is treated as a fourth channel through
    the same normalization. Box coordinates are scaled by the resize factors and
    the inverse transform is recorded on the returned sample. Constant channels
    map to all zeros at both normalization steps (no division by zero).
    """
    chans = [np.ascontiguousarray(triplet.image.transpose(2, 0, 1), dtype=np.float32)]
    if triplet.privileged is not None:
        chans.append(triplet.privileged[None].astype(np.float32) / 255.0)
    stacked = np.concatenate(chans, axis=0)

    if cfg.min_max_scale:
        stacked = _min_max_per_channel(stacked)

    t = torch.from_numpy(stacked).unsqueeze(0)
    size = cfg.target_size
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    t = t.squeeze(0)

    if cfg.standardize:
        if cfg.channel_stats is not None:
            means, stds = cfg.channel_stats
            if len(means) != t.shape[0] or len(stds) != t.shape[0]:
                raise ValueError(
                    f"channel_stats cover {len(means)} channels, sample has {t.shape[0]}"
                )
            mean = torch.tensor(means, dtype=t.dtype).view(-1, 1, 1)
            std = torch.tensor(stds, dtype=t.dtype).view(-1, 1, 1)
        else:
            mean = t.mean(dim=(1, 2), keepdim=True)
            std = t.std(dim=(1, 2), unbiased=False, keepdim=True)
        std = torch.where(std > 0, std, torch.ones_like(std))
        t = (t - mean) / std

    sx = size / triplet.width
    sy = size / triplet.height
    transform = BoxTransform(scale_x=sx, scale_y=sy)
    scaled = ObjectSet(
        objects=[
            LabeledObject(box=transform.apply(o.box), label=o.label, score=o.score)
            for o in triplet.truth
        ],
        image_id=triplet.image_id,
    )
    privileged = t[3:4] if triplet.privileged is not None else None
    return PreprocessedSample(
        image=t[:3],
        privileged=privileged,
        truth=scaled,
        transform=transform,
        image_id=triplet.image_id,
    )


def split(
    dataset: Sequence[DatasetTriplet],
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[list[DatasetTriplet], list[DatasetTriplet], list[DatasetTriplet]]:
    """Deterministic train/val/test partition under a seed.

    Val and test sizes are floors of their fractions; the remainder goes to
    train. The same seed always yields the same membership.
    """
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError(f"fractions must be in [0, 1], got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions} (sum {sum(fractions)})")
    n = len(dataset)
    n_val = int(np.floor(n * fractions[1]))
    n_test = int(np.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    train = [dataset[i] for i in perm[:n_train]]
    val = [dataset[i] for i in perm[n_train : n_train + n_val]]
    test = [dataset[i] for i in perm[n_train + n_val :]]
    return train, val, test


def write_split_manifest(path: Path | str, splits: dict[str, list[str]]) -> str:
    """Write image ids per split as '<split>\\t<image_id>' lines; returns the text."""
    lines = []
    for name in ("train", "val", "test"):
        for image_id in splits.get(name, []):
            lines.append(f"{name}\t{image_id}")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def read_split_manifest(path: Path | str) -> dict[str, list[str]]:
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, image_id = line.split("\t", 1)
        splits.setdefault(name, []).append(image_id)
    return splits
