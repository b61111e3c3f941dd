"""Runtime parity measurements: parameter payload size, parameter count,
approximate multiply-accumulate cost, and frames per second.

Static fields are functions of the parameters alone, so baseline and student
profiles of the same architecture are identical by construction; FPS is a
median over timed batches after warmup.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .detectors import DetectorHandle


@dataclass
class RuntimeProfile:
    size_mb: float
    parameters_m: float
    approx_gflops: Optional[float]
    fps: float
    warmup_batches: int
    timed_batches: int


def state_size_mb(model: nn.Module) -> float:
    """Serialized parameter payload (state_dict) in MiB."""
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.tell() / 2**20


def count_macs_per_image(handle: DetectorHandle, images: torch.Tensor) -> Optional[int]:
    """Layer-walk multiply-accumulate count for one forward, per image.

    Counts Conv2d and Linear contributions via transient hooks; None when the
    forward exercises no countable layers.
    """
    totals = {"macs": 0}
    hooks = []

    def conv_hook(module, inputs, output):
        out = output[0] if isinstance(output, (tuple, list)) else output
        per_position = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
        totals["macs"] += out.numel() * per_position

    def linear_hook(module, inputs, output):
        out = output[0] if isinstance(output, (tuple, list)) else output
        totals["macs"] += out.numel() * module.in_features

    for m in handle.model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    try:
        handle.model.eval()
        with torch.no_grad():
            handle.adapter.forward_eval(handle.model, images)
    finally:
        for h in hooks:
            h.remove()
    if totals["macs"] == 0:
        return None
    return totals["macs"] // images.shape[0]


def profile(
    handle: DetectorHandle,
    batch: torch.Tensor,
    repeats: int = 10,
    warmup: int = 3,
) -> RuntimeProfile:
    """Measure one handle on a sample batch.

    Parameter count and serialized size are exact and deterministic; FPS is the
    median images/second over `repeats` timed batches after `warmup` untimed
    ones.
    """
    handle.model.eval()
    macs = count_macs_per_image(handle, batch)
    with torch.no_grad():
        for _ in range(max(warmup, 1)):
            handle.adapter.forward_eval(handle.model, batch)
        rates = []
        for _ in range(max(repeats, 1)):
            start = time.perf_counter()
            handle.adapter.forward_eval(handle.model, batch)
            rates.append(batch.shape[0] / (time.perf_counter() - start))
    return RuntimeProfile(
        size_mb=state_size_mb(handle.model),
        parameters_m=handle.parameter_count / 1e6,
        approx_gflops=None if macs is None else 2.0 * macs / 1e9,
        fps=statistics.median(rates),
        warmup_batches=max(warmup, 1),
        timed_batches=max(repeats, 1),
    )


def write_profile_csv(rows: list[dict], path: Path | str) -> None:
    """Rows: {model, type, profile} -> CSV in runtime-table column order."""
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["Model", "Type", "Size (MB)", "Parameters (M)", "GFLOPS", "FPS"])
        for row in rows:
            p: RuntimeProfile = row["profile"]
            writer.writerow(
                [
                    row["model"],
                    row["type"],
                    f"{p.size_mb:.2f}",
                    f"{p.parameters_m:.2f}",
                    "-" if p.approx_gflops is None else f"{p.approx_gflops:.2f}",
                    f"{p.fps:.2f}",
                ]
            )
