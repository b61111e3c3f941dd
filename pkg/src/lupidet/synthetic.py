"""Deterministic shapes-on-noise detection dataset for desk-scale experiments.

Scenes are colored circles, squares, and triangles placed without overlap on a
value-noise background. Ground-truth boxes are tight pixel bounds of the
rendered shapes, so annotations are exact by construction. Generation is
reproducible bit-for-bit under a seed (integer pixel placement, PCG64 noise).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .types import BoundingBox, DatasetTriplet, LabeledObject, ObjectSet

SHAPE_KINDS = ("circle", "square", "triangle")


@dataclass
class NoiseParams:
    """Value-noise background: coarse blobs plus per-pixel grain.

    Defaults produce object-scale clutter so detection from RGB alone is
    nontrivial but learnable.
    """

    base_gray: float = 0.45
    coarse_amp: float = 0.30
    coarse_cells: int = 12
    fine_amp: float = 0.12


@dataclass
class SceneSpec:
    """Scene recipe. Distractors are hollow outlines of the same shape kinds,
    drawn from the same color distribution but never annotated: suppressing
    them requires learning the filled-versus-hollow cue rather than plain
    saliency."""

    image_size: int = 64
    class_shapes: dict[int, str] = field(
        default_factory=lambda: {0: "circle", 1: "square", 2: "triangle"}
    )
    objects_per_image: tuple[int, int] = (1, 4)
    distractors_per_image: tuple[int, int] = (3, 6)
    size_range: tuple[int, int] = (9, 18)
    object_contrast: tuple[float, float] = (0.12, 0.28)
    object_tint: float = 0.10
    background: NoiseParams = field(default_factory=NoiseParams)
    seed: int = 0

    def __post_init__(self):
        if self.objects_per_image[0] < 0:
            raise ValueError("objects_per_image minimum must be >= 0")
        for shape in self.class_shapes.values():
            if shape not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind '{shape}'")

    @property
    def class_count(self) -> int:
        return len(self.class_shapes)


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    p = spec.background
    s = spec.image_size
    coarse = rng.uniform(-1.0, 1.0, size=(p.coarse_cells, p.coarse_cells, 3))
    # bilinear upsample of the coarse grid
    yy = np.linspace(0, p.coarse_cells - 1, s)
    xx = np.linspace(0, p.coarse_cells - 1, s)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, p.coarse_cells - 1)
    x1 = np.minimum(x0 + 1, p.coarse_cells - 1)
    fy = (yy - y0)[:, None, None]
    fx = (xx - x0)[None, :, None]
    up = (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0][:, x1] * (1 - fy) * fx
        + coarse[y1][:, x0] * fy * (1 - fx)
        + coarse[y1][:, x1] * fy * fx
    )
    img = p.base_gray + p.coarse_amp * up + p.fine_amp * rng.uniform(-1.0, 1.0, size=(s, s, 3))
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind: str, x0: int, y0: int, size: int, canvas: int) -> np.ndarray:
    """Boolean pixel mask of one shape inside its size x size placement square."""
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    cx = x0 + size / 2.0
    cy = y0 + size / 2.0
    px = xx + 0.5
    py = yy + 0.5
    if kind == "square":
        return (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
    if kind == "circle":
        r = size / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "triangle":
        # upright isoceles: apex top-center, base along the bottom edge
        inside_rows = (py >= y0) & (py <= y0 + size)
        frac = np.clip((py - y0) / size, 0.0, 1.0)
        half_width = frac * (size / 2.0)
        return inside_rows & (np.abs(px - cx) <= half_width)
    raise ValueError(f"unknown shape kind '{kind}'")


def _hollow_mask(kind: str, x0: int, y0: int, size: int, canvas: int) -> np.ndarray:
    """Outline-only variant: the shape minus a copy shrunk by the rim width."""
    filled = _shape_mask(kind, x0, y0, size, canvas)
    rim = max(2, size // 6)
    inner_size = size - 2 * rim
    if inner_size <= 0:
        return filled
    inner = _shape_mask(kind, x0 + rim, y0 + rim, inner_size, canvas)
    return filled & ~inner


def _object_color(rng: np.random.Generator, spec: "SceneSpec") -> np.ndarray:
    sign = 1.0 if rng.random() < 0.5 else -1.0
    level = spec.background.base_gray + sign * rng.uniform(*spec.object_contrast)
    tint = rng.uniform(-spec.object_tint, spec.object_tint, size=3)
    return np.clip(level + tint, 0.0, 1.0)


def _tight_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate(spec: SceneSpec, n_images: int, id_prefix: str = "img") -> list[DatasetTriplet]:
    """Render n_images deterministic scenes with exact tight-box annotations."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    s = spec.image_size
    if spec.size_range[1] > s:
        raise ValueError(
            f"size_range {spec.size_range} exceeds image size {s}: spec infeasible"
        )
    rng = np.random.default_rng(spec.seed)
    classes = sorted(spec.class_shapes)

    # round-robin class deck keeps the class balance within a few objects
    deck: list[int] = []

    def next_class() -> int:
        if not deck:
            deck.extend(rng.permutation(classes).tolist())
        return deck.pop()

    def place(rng, placed, size):
        spot = None
        while size >= 6:
            for _ in range(60):
                x0 = int(rng.integers(0, s - size + 1))
                y0 = int(rng.integers(0, s - size + 1))
                clear = all(
                    x0 + size + 1 <= px or px + psz + 1 <= x0
                    or y0 + size + 1 <= py or py + psz + 1 <= y0
                    for px, py, psz in placed
                )
                if clear:
                    spot = (x0, y0, size)
                    break
            if spot is not None:
                return spot
            size -= 2  # crowded scene: shrink and retry
        return None

    triplets = []
    for i in range(n_images):
        img = _background(rng, spec)
        lo, hi = spec.objects_per_image
        n_objects = int(rng.integers(lo, hi + 1))
        placed: list[tuple[int, int, int]] = []  # (x0, y0, size)
        objects = []
        for _ in range(n_objects):
            label = next_class()
            spot = place(rng, placed, int(rng.integers(spec.size_range[0], spec.size_range[1] + 1)))
            if spot is None:
                continue
            x0, y0, size = spot
            mask = _shape_mask(spec.class_shapes[label], x0, y0, size, s)
            img[mask] = _object_color(rng, spec)
            objects.append(LabeledObject(box=_tight_box(mask), label=label))
            placed.append((x0, y0, size))
        if lo > 0 and not objects:
            raise RuntimeError("could not place any object; spec too crowded")
        d_lo, d_hi = spec.distractors_per_image
        for _ in range(int(rng.integers(d_lo, d_hi + 1)) if d_hi > 0 else 0):
            kind = spec.class_shapes[int(rng.choice(classes))]
            spot = place(rng, placed, int(rng.integers(spec.size_range[0], spec.size_range[1] + 1)))
            if spot is None:
                continue
            x0, y0, size = spot
            img[_hollow_mask(kind, x0, y0, size, s)] = _object_color(rng, spec)
            placed.append((x0, y0, size))
        # quantize exactly as the on-disk PNG will store it
        quantized = np.round(img * 255.0).astype(np.uint8)
        triplets.append(
            DatasetTriplet(
                image=quantized.astype(np.float32) / 255.0,
                truth=ObjectSet(objects=objects, image_id=f"{id_prefix}_{i:05d}"),
            )
        )
    return triplets


ACCEPTANCE_SPLITS = (("train", 300), ("val", 60), ("test", 60))


def make_acceptance_suite(
    seed: int, image_size: int = 64, sizes: tuple[tuple[str, int], ...] = ACCEPTANCE_SPLITS
) -> tuple[list[DatasetTriplet], list[DatasetTriplet], list[DatasetTriplet]]:
    """Fixed 3-class shapes suite: 300/60/60 images of 64x64 with 1-4 objects."""
    out = []
    for k, (name, n) in enumerate(sizes):
        spec = SceneSpec(image_size=image_size, seed=1000 * seed + k)
        out.append(generate(spec, n, id_prefix=name))
    return tuple(out)


def write_coco_dataset(
    triplets: list[DatasetTriplet],
    out_dir: Path | str,
    class_names: list[str],
) -> int:
    """Persist triplets as images/ plus a COCO-format annotations.json.

    Files identical to what is already on disk are left untouched; returns the
    number of files created or changed (idempotent re-runs return 0).
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    changed = 0

    images, annotations = [], []
    ann_id = 1
    for t in triplets:
        file_name = f"{t.image_id}.png"
        arr = np.round(t.image * 255.0).astype(np.uint8)
        path = image_dir / file_name
        data = png_bytes(arr)
        changed += write_if_changed(path, data)
        images.append(
            {"id": t.image_id, "file_name": file_name, "width": t.width, "height": t.height}
        )
        for obj in t.truth:
            b = obj.box
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": t.image_id,
                    "category_id": obj.label + 1,
                    "bbox": [b.x_min, b.y_min, b.width, b.height],
                    "area": b.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(class_names)],
    }
    changed += write_if_changed(
        out_dir / "annotations.json", json.dumps(doc, indent=1, sort_keys=True).encode()
    )
    return changed


def png_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_if_changed(path: Path, data: bytes) -> int:
    if path.exists() and path.read_bytes() == data:
        return 0
    path.write_bytes(data)
    return 1
