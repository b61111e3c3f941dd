"""Gradient-weighted class activation maps at the distillation tap layer.

The heatmap is the positive part of the channel-weighted tap activation
(weights are spatial means of the target gradient), min-max normalized to
[0, 1]. The default target scalar is the sum of the top-k detection class
scores; any callable over the raw detection dict can be substituted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .detectors import DetectorHandle, forward_with_tap

logger = logging.getLogger(__name__)


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w) float32 in [0, 1] at the tap spatial shape


def top_k_score_sum(k: int = 5) -> Callable:
    def target(raw: dict) -> torch.Tensor:
        scores = raw["scores"]
        if scores.numel() == 0:
            return torch.zeros(())
        return scores.topk(min(k, scores.numel())).values.sum()

    return target


def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def grad_cam(
    handle: DetectorHandle,
    image: torch.Tensor,
    target: Optional[Callable] = None,
) -> Heatmap:
    """Heatmap of the target scalar's gradient-weighted tap activation.

    image is a preprocessed (C, S, S) tensor. A target with zero gradient
    everywhere (e.g. no detections) yields an all-zero heatmap with a warning.
    """
    target = target or top_k_score_sum()
    handle.model.eval()
    x = image.unsqueeze(0).clone().requires_grad_(True)
    with torch.enable_grad():
        raw, tap = forward_with_tap(handle, x, raw_detections=True)
        scalar = target(raw[0])
        activation = tap.tensor
        if not (torch.is_tensor(scalar) and scalar.requires_grad):
            logger.warning("grad_cam target has no gradient path; returning zero heatmap")
            return Heatmap(values=np.zeros(activation.shape[2:], dtype=np.float32))
        grads = torch.autograd.grad(scalar, activation, allow_unused=True)[0]
    if grads is None or not torch.any(grads != 0):
        logger.warning("grad_cam gradients vanish everywhere; returning zero heatmap")
        return Heatmap(values=np.zeros(activation.shape[2:], dtype=np.float32))
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activation).sum(dim=1)).squeeze(0).detach().numpy()
    return Heatmap(values=normalize_heatmap(cam).astype(np.float32))


def _colormap(values: np.ndarray, colormap_id: str) -> np.ndarray:
    """Map [0, 1] values to RGB in [0, 1]; zero maps to black for every map."""
    v = np.clip(values, 0.0, 1.0)
    if colormap_id == "hot":
        return np.stack(
            [np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1
        )
    if colormap_id == "gray":
        return np.stack([v, v, v], axis=-1)
    raise ValueError(f"unknown colormap '{colormap_id}' (available: hot, gray)")


def overlay(
    heatmap: Heatmap,
    image: np.ndarray,
    colormap_id: str = "hot",
    out_path: Union[Path, str, None] = None,
    blend: float = 0.5,
) -> np.ndarray:
    """Alpha-blend the (upsampled) heatmap over an (H, W, 3) [0, 1] image.

    Returns the uint8 composite; writes it as PNG when out_path is given.
    """
    h, w = image.shape[:2]
    values = torch.from_numpy(heatmap.values)[None, None].float()
    upsampled = (
        F.interpolate(values, size=(h, w), mode="bilinear", align_corners=False)
        .squeeze()
        .numpy()
    )
    colored = _colormap(upsampled, colormap_id)
    composite = (1.0 - blend) * image + blend * colored
    out = np.round(np.clip(composite, 0.0, 1.0) * 255.0).astype(np.uint8)
    if out_path is not None:
        Image.fromarray(out).save(Path(out_path))
    return out


def heatmap_csv(heatmap: Heatmap, path: Path | str) -> None:
    np.savetxt(Path(path), heatmap.values, delimiter=",", fmt="%.6f")
