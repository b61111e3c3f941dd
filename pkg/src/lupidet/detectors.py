"""Pluggable detector abstraction: adapters over concrete architectures, teacher
input-layer extension to four channels, and feature capture at the distillation
tap point.

Per-architecture knowledge (constructor, first-conv path, tap-point path,
target/output conventions) is isolated in adapters registered by id. A tiny
from-scratch detector is always registered so desk-scale runs need no
pretrained downloads; torchvision-backed adapters cover a two-stage and a
one-stage architecture.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .types import BoundingBox, LabeledObject, ObjectSet

CHECKPOINT_FORMAT_VERSION = 1


class DetectorError(Exception):
    """Raised on adapter misuse: unknown ids, channel mismatches, bad checkpoints."""


def resolve_module(model: nn.Module, dotted_path: str) -> nn.Module:
    mod = model
    for part in dotted_path.split("."):
        mod = getattr(mod, part)
    return mod


def _set_module(model: nn.Module, dotted_path: str, new: nn.Module) -> None:
    parts = dotted_path.split(".")
    parent = resolve_module(model, ".".join(parts[:-1])) if len(parts) > 1 else model
    setattr(parent, parts[-1], new)


# ---------------------------------------------------------------------------
# tiny reference detector: single-scale anchor-free head over a 4-conv backbone


class TinyDetector(nn.Module):
    """Anchor-free detector for desk-scale experiments.

    Four strided/plain convs (overall stride 4) feed a 1x1 classification head
    (sigmoid scores per class) and a 1x1 box head predicting log-scale
    left/top/right/bottom distances from each cell center. The backbone output
    (the distillation tap) is the normalized pre-activation map: keeping the
    sign structure makes feature-direction comparisons informative, while the
    heads consume the rectified version.
    """

    stride = 8

    def __init__(self, class_count: int, in_channels: int = 3):
        super().__init__()
        self.class_count = class_count
        self.backbone = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 16, 3, stride=1, padding=1),
            nn.GroupNorm(4, 16),
        )
        self.cls_head = nn.Conv2d(16, class_count, 1)
        self.box_head = nn.Conv2d(16, 4, 1)
        # bias the classifier toward "background" so early training is stable
        nn.init.constant_(self.cls_head.bias, -math.log((1 - 0.01) / 0.01))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = F.relu(self.backbone(x))
        return self.cls_head(features), self.box_head(features)

    def cell_centers(self, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
        cy = (torch.arange(h, dtype=torch.float32) + 0.5) * self.stride
        cx = (torch.arange(w, dtype=torch.float32) + 0.5) * self.stride
        return cy, cx


def _sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def _tiny_assign(model: TinyDetector, targets: list[dict], h: int, w: int):
    """FCOS-style single-scale assignment: a cell is positive for the
    smallest-area ground-truth box containing its center."""
    cy, cx = model.cell_centers(h, w)
    cls_t = torch.zeros(len(targets), model.class_count, h, w)
    box_t = torch.zeros(len(targets), 4, h, w)
    pos = torch.zeros(len(targets), h, w, dtype=torch.bool)
    for b, tgt in enumerate(targets):
        boxes, labels = tgt["boxes"], tgt["labels"]
        if boxes.numel() == 0:
            continue
        gx = cx.view(1, 1, w)
        gy = cy.view(1, h, 1)
        x0, y0, x1, y1 = (boxes[:, i].view(-1, 1, 1) for i in range(4))
        inside = (gx >= x0) & (gx < x1) & (gy >= y0) & (gy < y1)  # (N, h, w)
        areas = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).view(-1, 1, 1)
        cost = torch.where(inside, areas.expand(-1, h, w), torch.inf)
        best = cost.argmin(dim=0)
        covered = inside.any(dim=0)
        pos[b] = covered
        ys, xs = torch.nonzero(covered, as_tuple=True)
        n = best[ys, xs]
        cls_t[b, labels[n], ys, xs] = 1.0
        ccx, ccy = cx[xs], cy[ys]
        box_t[b, 0, ys, xs] = ccx - boxes[n, 0]
        box_t[b, 1, ys, xs] = ccy - boxes[n, 1]
        box_t[b, 2, ys, xs] = boxes[n, 2] - ccx
        box_t[b, 3, ys, xs] = boxes[n, 3] - ccy
    return cls_t, box_t, pos


def _tiny_decode_distances(raw: torch.Tensor) -> torch.Tensor:
    return torch.exp(raw.clamp(-6.0, 6.0)) * TinyDetector.stride


def tiny_detector_loss(model: TinyDetector, images: torch.Tensor, targets: list[dict]):
    cls_logits, box_raw = model(images)
    _, _, h, w = cls_logits.shape
    cls_t, box_t, pos = _tiny_assign(model, targets, h, w)
    n_pos = max(int(pos.sum()), 1)
    cls_loss = _sigmoid_focal_loss(cls_logits, cls_t).sum() / n_pos

    if pos.any():
        dist = _tiny_decode_distances(box_raw)
        cy, cx = model.cell_centers(h, w)
        gx = cx.view(1, 1, w).expand(len(targets), h, w)
        gy = cy.view(1, h, 1).expand(len(targets), h, w)
        px0, py0 = gx - dist[:, 0], gy - dist[:, 1]
        px1, py1 = gx + dist[:, 2], gy + dist[:, 3]
        tx0, ty0 = gx - box_t[:, 0], gy - box_t[:, 1]
        tx1, ty1 = gx + box_t[:, 2], gy + box_t[:, 3]
        iw = (torch.minimum(px1, tx1) - torch.maximum(px0, tx0)).clamp(min=0)
        ih = (torch.minimum(py1, ty1) - torch.maximum(py0, ty0)).clamp(min=0)
        inter = iw * ih
        union = (px1 - px0) * (py1 - py0) + (tx1 - tx0) * (ty1 - ty0) - inter
        iou = inter / union.clamp(min=1e-9)
        box_loss = (1.0 - iou[pos]).mean()
    else:
        box_loss = box_raw.sum() * 0.0
    return {"classification": cls_loss, "box_reg": box_loss}


def tiny_detector_decode(
    model: TinyDetector,
    images: torch.Tensor,
    score_threshold: float = 0.02,
    pre_nms_top_k: int = 300,
) -> list[dict]:
    """Raw per-image detections (boxes, scores, labels tensors), no suppression."""
    cls_logits, box_raw = model(images)
    b, c, h, w = cls_logits.shape
    scores = torch.sigmoid(cls_logits)
    dist = _tiny_decode_distances(box_raw)
    cy, cx = model.cell_centers(h, w)
    size_y, size_x = h * model.stride, w * model.stride
    out = []
    for i in range(b):
        flat = scores[i].reshape(-1)
        k = min(pre_nms_top_k, flat.numel())
        top, idx = flat.topk(k)
        keep = top >= score_threshold
        top, idx = top[keep], idx[keep]
        labels = idx // (h * w)
        cell = idx % (h * w)
        ys, xs = cell // w, cell % w
        ccx, ccy = cx[xs], cy[ys]
        d = dist[i][:, ys, xs]
        boxes = torch.stack(
            [
                (ccx - d[0]).clamp(0, size_x),
                (ccy - d[1]).clamp(0, size_y),
                (ccx + d[2]).clamp(0, size_x),
                (ccy + d[3]).clamp(0, size_y),
            ],
            dim=1,
        )
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        out.append({"boxes": boxes[valid], "scores": top[valid], "labels": labels[valid]})
    return out


# ---------------------------------------------------------------------------
# adapters


class DetectorAdapter:
    """Per-architecture knowledge: construction, first conv, tap point, and
    target/output conventions."""

    architecture_id: str
    first_conv_path: str
    tap_path: str

    def build(self, class_count: int, pretrained: bool, image_size: Optional[int]) -> nn.Module:
        raise NotImplementedError

    def forward_train(self, model, images, targets) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def forward_eval(self, model, images) -> list[dict]:
        raise NotImplementedError


class TinyAdapter(DetectorAdapter):
    architecture_id = "tiny"
    first_conv_path = "backbone.0"
    tap_path = "backbone"

    def build(self, class_count, pretrained, image_size):
        if pretrained:
            raise DetectorError("architecture 'tiny' has no pretrained weights available")
        return TinyDetector(class_count)

    def forward_train(self, model, images, targets):
        return tiny_detector_loss(model, images, targets)

    def forward_eval(self, model, images):
        return tiny_detector_decode(model, images)


class TorchvisionAdapter(DetectorAdapter):
    """Wraps torchvision detection models behind the common conventions.

    The internal GeneralizedRCNNTransform normalization is neutralized (mean 0,
    std 1) because preprocessing owns normalization; labels are shifted by one
    on the way in/out when the architecture reserves index 0 for background.
    """

    def __init__(
        self,
        architecture_id: str,
        factory: Callable,
        first_conv_path: str,
        tap_path: str,
        background_class: bool = True,
        accepts_size: bool = True,
    ):
        self.architecture_id = architecture_id
        self._factory = factory
        self.first_conv_path = first_conv_path
        self.tap_path = tap_path
        self._background_class = background_class
        self._accepts_size = accepts_size

    @property
    def _label_offset(self) -> int:
        return 1 if self._background_class else 0

    def build(self, class_count, pretrained, image_size):
        kwargs = {"image_mean": [0.0, 0.0, 0.0], "image_std": [1.0, 1.0, 1.0]}
        if self._accepts_size and image_size is not None:
            kwargs.update(min_size=image_size, max_size=image_size)
        if pretrained:
            try:
                return self._factory(weights="DEFAULT", **kwargs)
            except Exception as e:
                raise DetectorError(
                    f"pretrained weights for '{self.architecture_id}' unavailable: {e}"
                ) from e
        return self._factory(
            weights=None,
            weights_backbone=None,
            num_classes=class_count + self._label_offset,
            **kwargs,
        )

    def forward_train(self, model, images, targets):
        shifted = [
            {"boxes": t["boxes"], "labels": t["labels"] + self._label_offset} for t in targets
        ]
        was_training = model.training
        model.train()
        try:
            return model(list(images), shifted)
        finally:
            model.train(was_training)

    def forward_eval(self, model, images):
        outputs = model(list(images))
        return [
            {
                "boxes": o["boxes"],
                "scores": o["scores"],
                "labels": o["labels"] - self._label_offset,
            }
            for o in outputs
        ]


def _torchvision_registry() -> dict[str, DetectorAdapter]:
    from torchvision.models.detection import (
        fasterrcnn_resnet50_fpn,
        ssdlite320_mobilenet_v3_large,
    )

    return {
        # two-stage; tap: last conv stage before the FPN
        "fasterrcnn_resnet50_fpn": TorchvisionAdapter(
            "fasterrcnn_resnet50_fpn",
            fasterrcnn_resnet50_fpn,
            first_conv_path="backbone.body.conv1",
            tap_path="backbone.body.layer4",
        ),
        # one-stage; tap: final trunk block before the auxiliary extra layers
        "ssdlite320_mobilenet_v3_large": TorchvisionAdapter(
            "ssdlite320_mobilenet_v3_large",
            ssdlite320_mobilenet_v3_large,
            first_conv_path="backbone.features.0.0.0",
            tap_path="backbone.features.1",
            accepts_size=False,
        ),
    }


_REGISTRY: dict[str, DetectorAdapter] = {"tiny": TinyAdapter(), **_torchvision_registry()}


def register_architecture(adapter: DetectorAdapter) -> None:
    _REGISTRY[adapter.architecture_id] = adapter


def registered_architectures() -> list[str]:
    return sorted(_REGISTRY)


def get_adapter(architecture_id: str) -> DetectorAdapter:
    if architecture_id not in _REGISTRY:
        raise DetectorError(
            f"unknown architecture '{architecture_id}'; registered: {registered_architectures()}"
        )
    return _REGISTRY[architecture_id]


# ---------------------------------------------------------------------------
# handles


@dataclass
class DetectorHandle:
    architecture_id: str
    model: nn.Module
    input_channels: int
    class_count: int
    tap_point_id: str
    image_size: Optional[int] = None

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    @property
    def adapter(self) -> DetectorAdapter:
        return get_adapter(self.architecture_id)

    def freeze(self) -> None:
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]


@dataclass
class TapFeatures:
    """Distillation-layer activations for one forward batch."""

    tensor: torch.Tensor  # (B, C, H, W)

    @property
    def source_shape(self) -> tuple[int, int, int]:
        return tuple(self.tensor.shape[1:])

    def flattened(self) -> torch.Tensor:
        """Per-image flattened feature vectors, shape (B, C*H*W)."""
        return self.tensor.reshape(self.tensor.shape[0], -1)


def build_detector(
    architecture_id: str,
    class_count: int,
    pretrained: bool = False,
    image_size: Optional[int] = None,
) -> DetectorHandle:
    """Construct a registered architecture with a 3-channel input layer.

    image_size, when given, pins any internal resize to a fixed square frame so
    preprocessing stays the single owner of geometry.
    """
    adapter = get_adapter(architecture_id)
    model = adapter.build(class_count, pretrained, image_size)
    return DetectorHandle(
        architecture_id=architecture_id,
        model=model,
        input_channels=3,
        class_count=class_count,
        tap_point_id=adapter.tap_path,
        image_size=image_size,
    )


def extend_input_channels(handle: DetectorHandle) -> DetectorHandle:
    """Return a 4-channel copy of the handle for teacher training.

    Weights for channels 0-2 of the first conv are bitwise copies of the
    originals; the new channel-3 slice is drawn from a Kaiming Normal with
    fan-in computed over the full extended receptive field (4 x kh x kw). All
    other parameters are untouched. The input handle is not modified.
    """
    if handle.input_channels != 3:
        raise DetectorError(f"handle already has {handle.input_channels} input channels")
    model = copy.deepcopy(handle.model)
    conv = resolve_module(model, handle.adapter.first_conv_path)
    if not isinstance(conv, nn.Conv2d) or conv.in_channels != 3 or conv.groups != 1:
        raise DetectorError(f"first conv at '{handle.adapter.first_conv_path}' is not extendable")
    new = nn.Conv2d(
        4,
        conv.out_channels,
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        dilation=conv.dilation,
        bias=conv.bias is not None,
    )
    kh, kw = conv.kernel_size
    fan_in = 4 * kh * kw
    with torch.no_grad():
        new.weight[:, :3] = conv.weight
        new.weight[:, 3:].normal_(0.0, math.sqrt(2.0 / fan_in))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    _set_module(model, handle.adapter.first_conv_path, new)
    transform = getattr(model, "transform", None)
    if transform is not None and hasattr(transform, "image_mean"):
        transform.image_mean = list(transform.image_mean) + [0.0]
        transform.image_std = list(transform.image_std) + [1.0]
    return DetectorHandle(
        architecture_id=handle.architecture_id,
        model=model,
        input_channels=4,
        class_count=handle.class_count,
        tap_point_id=handle.tap_point_id,
        image_size=handle.image_size,
    )


def forward_with_tap(
    handle: DetectorHandle,
    images: torch.Tensor,
    targets: Optional[list[dict]] = None,
    raw_detections: bool = False,
):
    """Run a forward pass while capturing the tap-point activation.

    With targets, the architecture's native training losses are returned
    (dict of loss components); without, per-image detections. Tap capture uses
    a transient hook and does not alter the forward computation. Only one
    forward may be in flight per handle.
    """
    if images.ndim != 4 or images.shape[1] != handle.input_channels:
        raise DetectorError(
            f"expected (B, {handle.input_channels}, H, W) input, got {tuple(images.shape)}"
        )
    captured: list[torch.Tensor] = []
    hook = resolve_module(handle.model, handle.tap_point_id).register_forward_hook(
        lambda module, inputs, output: captured.append(output)
    )
    try:
        if targets is not None:
            result = handle.adapter.forward_train(handle.model, images, targets)
        else:
            handle.model.eval()
            raw = handle.adapter.forward_eval(handle.model, images)
            result = raw if raw_detections else [_to_object_set(r) for r in raw]
    finally:
        hook.remove()
    if not captured:
        raise DetectorError(f"tap point '{handle.tap_point_id}' did not fire during forward")
    return result, TapFeatures(tensor=captured[-1])


def _to_object_set(raw: dict) -> ObjectSet:
    objects = []
    for box, score, label in zip(raw["boxes"], raw["scores"], raw["labels"]):
        x0, y0, x1, y1 = (float(v) for v in box)
        if x1 <= x0 or y1 <= y0:
            continue
        objects.append(
            LabeledObject(
                box=BoundingBox(max(x0, 0.0), max(y0, 0.0), x1, y1),
                label=int(label),
                score=min(max(float(score), 0.0), 1.0),
            )
        )
    return ObjectSet(objects=objects)


def nms(detections: ObjectSet, iou_threshold: float) -> ObjectSet:
    """Class-aware greedy suppression; output sorted by descending score.

    Per class, the highest-scoring box is kept and same-class boxes with IoU
    strictly above the threshold against any kept box are removed.
    """
    for obj in detections:
        if obj.score is None:
            raise ValueError("nms requires every detection to carry a score")
    order = sorted(range(len(detections.objects)), key=lambda i: (-detections.objects[i].score, i))
    kept: list[int] = []
    for i in order:
        cand = detections.objects[i]
        suppressed = False
        for j in kept:
            prev = detections.objects[j]
            if prev.label != cand.label:
                continue
            inter = cand.box.intersection_area(prev.box)
            union = cand.box.area + prev.box.area - inter
            if union > 0 and inter / union > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return ObjectSet(objects=[detections.objects[i] for i in kept], image_id=detections.image_id)


# ---------------------------------------------------------------------------
# checkpoints


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over all parameter and buffer bytes, in state_dict order."""
    h = hashlib.sha256()
    for key, tensor in model.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    handle: DetectorHandle,
    path: Path | str,
    role: str = "baseline",
    alpha: Optional[float] = None,
    epoch: int = 0,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture_id": handle.architecture_id,
            "input_channels": handle.input_channels,
            "class_count": handle.class_count,
            "tap_point_id": handle.tap_point_id,
            "image_size": handle.image_size,
            "role": role,
            "alpha": alpha,
            "epoch": epoch,
            "state_dict": handle.model.state_dict(),
        },
        path,
    )
    return path


def read_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise DetectorError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise DetectorError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise DetectorError(f"{path} is not a detector checkpoint")
    if ckpt["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise DetectorError(
            f"{path}: unsupported checkpoint format version {ckpt['format_version']}"
        )
    return ckpt


def load_into(handle: DetectorHandle, path: Path | str) -> DetectorHandle:
    """Load checkpoint weights into an existing handle; refuses mismatches."""
    ckpt = read_checkpoint(path)
    if ckpt["architecture_id"] != handle.architecture_id:
        raise DetectorError(
            f"checkpoint architecture '{ckpt['architecture_id']}' does not match "
            f"handle '{handle.architecture_id}'"
        )
    if ckpt["input_channels"] != handle.input_channels:
        raise DetectorError(
            f"refusing to load {ckpt['input_channels']}-channel checkpoint into "
            f"{handle.input_channels}-channel handle"
        )
    if ckpt["class_count"] != handle.class_count:
        raise DetectorError(
            f"checkpoint class_count {ckpt['class_count']} != handle {handle.class_count}"
        )
    handle.model.load_state_dict(ckpt["state_dict"])
    return handle


def load_detector(path: Path | str) -> DetectorHandle:
    """Rebuild the detector a checkpoint describes and load its weights."""
    ckpt = read_checkpoint(path)
    handle = build_detector(
        ckpt["architecture_id"],
        ckpt["class_count"],
        pretrained=False,
        image_size=ckpt.get("image_size"),
    )
    if ckpt["input_channels"] == 4:
        handle = extend_input_channels(handle)
    handle.model.load_state_dict(ckpt["state_dict"])
    return handle
