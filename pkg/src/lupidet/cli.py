"""Command surface: prepare, train, sweep, evaluate, gradcam, profile.

One YAML config drives every stage; artifacts land under the config's
output_dir. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import masks as masks_mod
from . import synthetic as synth_mod
from .config import ConfigError, RunConfig, load_config
from .detectors import (
    build_detector,
    extend_input_channels,
    load_detector,
    read_checkpoint,
)
from .gradcam import grad_cam, heatmap_csv, overlay
from .inference import evaluate_detector
from .metrics import EvalReport, coco_report, compare_runs, write_comparison_csv
from .profiling import profile as profile_handle
from .profiling import write_profile_csv
from .training import (
    TrainConfig,
    sweep_alpha,
    train_baseline,
    train_student,
    train_teacher,
)
from .types import DatasetTriplet, LabeledObject, ObjectSet, PreprocessConfig

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# dataset materialization


def _synthetic_splits(cfg: RunConfig) -> tuple[dict[str, list[DatasetTriplet]], list[str]]:
    s = cfg.dataset.synthetic
    kinds = [synth_mod.SHAPE_KINDS[c % len(synth_mod.SHAPE_KINDS)] for c in range(s.class_count)]
    class_names = [f"{kind}_{c}" if s.class_count > 3 else kind for c, kind in enumerate(kinds)]
    splits = {}
    for k, (name, n) in enumerate((("train", s.n_train), ("val", s.n_val), ("test", s.n_test))):
        spec = synth_mod.SceneSpec(
            image_size=s.image_size,
            class_shapes={c: kinds[c] for c in range(s.class_count)},
            objects_per_image=(s.min_objects, s.max_objects),
            size_range=(s.size_min, s.size_max),
            seed=1000 * cfg.dataset.seed + k,
        )
        splits[name] = synth_mod.generate(spec, n, id_prefix=name)
    return splits, class_names


def _ingested_splits(cfg: RunConfig) -> tuple[dict[str, list[DatasetTriplet]], list[str]]:
    d = cfg.dataset
    if d.format == "coco":
        result = data_mod.ingest_coco(d.annotations, d.image_root)
    else:
        result = data_mod.ingest_voc(d.xml_dir, d.image_root, d.class_names)
    triplets = list(result.triplets)
    if tuple(d.tile_grid) != (1, 1):
        triplets = [child for t in triplets for child in data_mod.tile(t, tuple(d.tile_grid))]
    train, val, test = data_mod.split(triplets, tuple(d.split_fractions), d.seed)
    return {"train": train, "val": val, "test": test}, result.class_names


def _privileged_raster(
    triplet: DatasetTriplet, cfg: RunConfig, mask_spec: masks_mod.MaskSpec
) -> np.ndarray:
    p = cfg.privileged
    size = (triplet.height, triplet.width)

    def external(source: str) -> np.ndarray:
        src_dir = Path(p.saliency_dir if source == "saliency" else p.depth_dir)
        return masks_mod.ingest_raster(src_dir / f"{triplet.image_id}.png", size)

    if p.mode == "bbox_mask":
        return masks_mod.render_bbox_mask(triplet.truth, *size, mask_spec)
    if p.mode == "external":
        return external(p.source)
    rasters, roles = [], sorted(p.fusion_weights)
    for role in roles:
        if role == "mask":
            rasters.append(masks_mod.render_bbox_mask(triplet.truth, *size, mask_spec))
        else:
            rasters.append(external(role))
    spec = masks_mod.FusionSpec(
        weights=tuple(p.fusion_weights[r] for r in roles), sources=tuple(roles)
    )
    return masks_mod.fuse(rasters, spec)


def cmd_prepare(cfg: RunConfig, args) -> int:
    prepared = cfg.prepared_dir
    splits, class_names = (
        _synthetic_splits(cfg) if cfg.dataset.format == "synthetic" else _ingested_splits(cfg)
    )
    mask_spec = masks_mod.MaskSpec(
        class_count=len(class_names),
        intensity_map={int(k): int(v) for k, v in (cfg.privileged.intensity_map or {}).items()},
    )

    ordered = [t for name in SPLITS for t in splits[name]]
    changed = synth_mod.write_coco_dataset(ordered, prepared, class_names)

    mask_dir = prepared / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for t in ordered:
        raster = _privileged_raster(t, cfg, mask_spec)
        changed += synth_mod.write_if_changed(
            masks_mod.mask_path(t.image_id, mask_dir), synth_mod.png_bytes(raster)
        )

    manifest_text = "".join(
        f"{name}\t{t.image_id}\n" for name in SPLITS for t in splits[name]
    )
    changed += synth_mod.write_if_changed(prepared / "splits.txt", manifest_text.encode())
    meta = {"class_names": class_names, "format": cfg.dataset.format,
            "privileged_mode": cfg.privileged.mode}
    changed += synth_mod.write_if_changed(
        prepared / "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode()
    )

    per_class = {name: 0 for name in class_names}
    for t in ordered:
        for obj in t.truth:
            per_class[class_names[obj.label]] += 1
    print(f"prepared {len(ordered)} images, {len(ordered)} masks under {prepared}")
    for name in SPLITS:
        print(f"  {name}: {len(splits[name])} images")
    for name, count in per_class.items():
        print(f"  class {name}: {count} objects")
    print(f"{changed} files changed")
    return 0


def load_prepared(prepared_dir: Path) -> tuple[dict[str, list[DatasetTriplet]], list[str]]:
    """Read back a prepared directory: triplets per split with masks attached."""
    if not (prepared_dir / "annotations.json").exists():
        raise ConfigError(
            [f"prepared dataset not found under {prepared_dir}; run 'prepare' first"]
        )
    result = data_mod.ingest_coco(prepared_dir / "annotations.json", prepared_dir / "images")
    by_id = {t.image_id: t for t in result.triplets}
    manifest = data_mod.read_split_manifest(prepared_dir / "splits.txt")
    mask_dir = prepared_dir / "masks"
    splits: dict[str, list[DatasetTriplet]] = {}
    for name in SPLITS:
        items = []
        for image_id in manifest.get(name, []):
            t = by_id[image_id]
            path = masks_mod.mask_path(image_id, mask_dir)
            if path.exists():
                t = DatasetTriplet(
                    image=t.image,
                    truth=t.truth,
                    privileged=masks_mod.ingest_raster(path, (t.height, t.width)),
                )
            items.append(t)
        splits[name] = items
    return splits, result.class_names


# ---------------------------------------------------------------------------
# training


def _preprocess_cfg(cfg: RunConfig) -> PreprocessConfig:
    stats = cfg.preprocess.channel_stats
    return PreprocessConfig(
        target_size=cfg.preprocess.target_size,
        channel_stats=None if stats is None else (tuple(stats["mean"]), tuple(stats["std"])),
    )


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs,
        learning_rate=t.learning_rate,
        early_stop_patience=t.early_stop_patience,
        batch_size=t.batch_size,
        seed=t.seed,
        monitor=t.monitor,
    )


def _run_dir(cfg: RunConfig, run_id: str, resume: bool) -> Path:
    run_dir = Path(cfg.output_dir) / "runs" / run_id
    if run_dir.exists() and any(run_dir.iterdir()) and not resume:
        raise ConfigError(
            [f"run directory {run_dir} already exists; pass --resume to reuse it"]
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _best_checkpoint(run_dir: Path) -> Path | None:
    markers = sorted(run_dir.glob("*.best"))
    if not markers:
        return None
    return run_dir / markers[0].read_text().strip()


def _default_teacher_checkpoint(cfg: RunConfig) -> Path | None:
    run_dir = Path(cfg.output_dir) / "runs" / _run_id(cfg, "teacher", None)
    if not run_dir.exists():
        return None
    return _best_checkpoint(run_dir)


def _run_id(cfg: RunConfig, role: str, alpha: float | None) -> str:
    alpha_part = "na" if alpha is None else format(alpha, "g")
    return f"{cfg.model.architecture_id}.{role}.a{alpha_part}.s{cfg.train.seed}"


def _single_alpha(cfg: RunConfig) -> float:
    alphas = cfg.alphas
    if len(alphas) != 1:
        raise ConfigError(
            ["train.alpha: a single value is required for 'train'; use 'sweep' for lists"]
        )
    return alphas[0]


def cmd_train(cfg: RunConfig, args) -> int:
    splits, class_names = load_prepared(cfg.prepared_dir)
    role = args.role
    alpha = _single_alpha(cfg) if role == "student" else (0.0 if role == "baseline" else None)
    run_id = _run_id(cfg, role, alpha)
    run_dir = _run_dir(cfg, run_id, args.resume)

    teacher_ckpt = None
    if role == "student":
        teacher_ckpt = getattr(args, "teacher_ckpt", None) or cfg.train.teacher_checkpoint
        teacher_ckpt = teacher_ckpt or _default_teacher_checkpoint(cfg)
        if teacher_ckpt is None:
            raise ConfigError(
                ["student training needs a teacher checkpoint: set train.teacher_checkpoint, "
                 "pass --teacher-ckpt, or train a teacher under the same output_dir first"]
            )
    if role == "teacher" and any(t.privileged is None for t in splits["train"] + splits["val"]):
        raise ConfigError(["teacher training requires privileged rasters; re-run 'prepare'"])

    torch.manual_seed(cfg.train.seed)
    handle = build_detector(
        cfg.model.architecture_id,
        len(class_names),
        pretrained=cfg.model.pretrained,
        image_size=cfg.preprocess.target_size,
    )
    tcfg = _train_cfg(cfg)
    pcfg = _preprocess_cfg(cfg)

    if role == "teacher":
        handle = extend_input_channels(handle)
        start_epoch = 0
        if args.resume:
            previous = _best_checkpoint(run_dir)
            if previous is not None:
                ckpt = read_checkpoint(previous)
                handle.model.load_state_dict(ckpt["state_dict"])
                start_epoch = ckpt["epoch"] + 1
        result = train_teacher(
            splits["train"], splits["val"], handle, tcfg, run_dir,
            preprocess_cfg=pcfg, run_id=run_id, start_epoch=start_epoch,
        )
    elif role == "baseline":
        result = train_baseline(
            splits["train"], splits["val"], handle, tcfg, run_dir,
            preprocess_cfg=pcfg, run_id=run_id,
        )
    else:
        result = train_student(
            splits["train"], splits["val"], teacher_ckpt, handle, alpha, tcfg, run_dir,
            preprocess_cfg=pcfg, run_id=run_id,
        )
    print(
        f"{run_id}: {result.epochs_run} epochs, best epoch {result.best_epoch} "
        f"(val loss {result.best_val_loss:.4f})"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    splits, class_names = load_prepared(cfg.prepared_dir)
    teacher_ckpt = cfg.train.teacher_checkpoint or _default_teacher_checkpoint(cfg)
    if teacher_ckpt is None:
        raise ConfigError(["sweep needs a teacher checkpoint (train.teacher_checkpoint "
                           "or a prior teacher run under output_dir)"])
    sweep_dir = Path(cfg.output_dir) / "sweep"
    entries = sweep_alpha(
        splits["train"],
        splits["val"],
        teacher_ckpt,
        cfg.model.architecture_id,
        cfg.alphas,
        _train_cfg(cfg),
        sweep_dir,
        preprocess_cfg=_preprocess_cfg(cfg),
        image_size=cfg.preprocess.target_size,
        class_count=len(class_names),
    )
    eval_triplets = splits[cfg.eval.split]
    reports: dict[str, EvalReport] = {}
    for entry in entries:
        student = load_detector(entry.result.checkpoint_path)
        entry.report = evaluate_detector(
            student,
            eval_triplets,
            preprocess_cfg=_preprocess_cfg(cfg),
            nms_iou=cfg.eval.nms_iou,
            max_detections=cfg.eval.max_detections,
        )
        reports[f"alpha={entry.alpha:g}"] = entry.report

    comparison = compare_runs(reports)
    write_comparison_csv(comparison, sweep_dir / "alpha_table.csv", sweep_dir / "radar.csv")
    best_label = comparison["best"]
    (sweep_dir / "best_alpha.txt").write_text(best_label + "\n")
    print(f"swept {len(entries)} alpha values on split '{cfg.eval.split}'")
    for entry in entries:
        marker = " <- best" if f"alpha={entry.alpha:g}" == best_label else ""
        print(f"  alpha={entry.alpha:g}: mAP={entry.report.map_50_95:.2f} "
              f"mAP@50={entry.report.map_50:.2f}{marker}")
    print(f"table: {sweep_dir / 'alpha_table.csv'}")
    return 0


# ---------------------------------------------------------------------------
# evaluation and analysis


def _oracle_detections(truths: list[ObjectSet]) -> list[ObjectSet]:
    return [
        ObjectSet(
            objects=[LabeledObject(box=o.box, label=o.label, score=1.0) for o in s.objects],
            image_id=s.image_id,
        )
        for s in truths
    ]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    splits, class_names = load_prepared(cfg.prepared_dir)
    triplets = splits[args.split or cfg.eval.split]
    split_name = args.split or cfg.eval.split
    eval_dir = Path(cfg.output_dir) / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    if args.oracle_detections:
        pcfg = _preprocess_cfg(cfg)
        truths = [data_mod.preprocess(t, pcfg).truth for t in triplets]
        report = coco_report(_oracle_detections(truths), truths, len(class_names))
        label = "oracle"
    else:
        if not args.checkpoint:
            raise ConfigError(["evaluate needs --checkpoint (or --oracle-detections)"])
        handle = load_detector(args.checkpoint)
        if handle.class_count != len(class_names):
            raise ConfigError(
                [f"checkpoint class_count {handle.class_count} does not match dataset "
                 f"({len(class_names)} classes)"]
            )
        report = evaluate_detector(
            handle,
            triplets,
            preprocess_cfg=_preprocess_cfg(cfg),
            nms_iou=cfg.eval.nms_iou,
            max_detections=cfg.eval.max_detections,
            use_privileged=handle.input_channels == 4,
        )
        label = Path(args.checkpoint).stem

    json_path = eval_dir / f"{label}.{split_name}.report.json"
    json_path.write_text(report.to_json() + "\n")
    csv_path = eval_dir / f"{label}.{split_name}.report.csv"
    csv_path.write_text(
        ",".join(EvalReport.SCALARS) + "\n" + ",".join(str(v) for v in report.csv_row()) + "\n"
    )
    print(f"[{label} on {split_name}] {report.formatted(decimals=2)}")
    print(f"report: {json_path}")
    return 0


def cmd_gradcam(cfg: RunConfig, args) -> int:
    if not args.image_ids:
        print("no image ids given; nothing to do")
        return 0
    splits, _ = load_prepared(cfg.prepared_dir)
    split_name = args.split or cfg.eval.split
    by_id = {t.image_id: t for t in splits[split_name]}
    unknown = [i for i in args.image_ids if i not in by_id]
    if unknown:
        known = sorted(by_id)
        preview = ", ".join(known[:10]) + ("..." if len(known) > 10 else "")
        raise ConfigError(
            [f"unknown image ids {unknown} in split '{split_name}'; valid ids: {preview}"]
        )
    handle = load_detector(args.checkpoint)
    ckpt = read_checkpoint(args.checkpoint)
    run_label = ckpt["role"] if ckpt["alpha"] is None else f"{ckpt['role']}.a{ckpt['alpha']:g}"
    out_dir = Path(cfg.output_dir) / "gradcam"
    out_dir.mkdir(parents=True, exist_ok=True)
    pcfg = _preprocess_cfg(cfg)
    for image_id in args.image_ids:
        triplet = by_id[image_id]
        sample = data_mod.preprocess(triplet, pcfg)
        image_tensor = sample.model_input if handle.input_channels == 4 else sample.image
        heatmap = grad_cam(handle, image_tensor)
        out_path = out_dir / f"{image_id}.{run_label}.gradcam.png"
        overlay(heatmap, triplet.image, colormap_id=args.colormap, out_path=out_path)
        if args.dump_csv:
            heatmap_csv(heatmap, out_dir / f"{image_id}.{run_label}.gradcam.csv")
        print(f"wrote {out_path}")
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    splits, _ = load_prepared(cfg.prepared_dir)
    sample = data_mod.preprocess(splits["test"][0], _preprocess_cfg(cfg))
    rows = []
    for ckpt_path in args.checkpoints:
        handle = load_detector(ckpt_path)
        ckpt = read_checkpoint(ckpt_path)
        batch = (sample.model_input if handle.input_channels == 4 else sample.image).unsqueeze(0)
        prof = profile_handle(handle, batch, repeats=args.repeats)
        rows.append({"model": handle.architecture_id, "type": ckpt["role"], "profile": prof})
    out_path = Path(cfg.output_dir) / "profile.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_profile_csv(rows, out_path)
    for row in rows:
        p = row["profile"]
        gflops = "-" if p.approx_gflops is None else f"{p.approx_gflops:.2f}"
        print(
            f"{row['model']} ({row['type']}): {p.size_mb:.2f} MB, "
            f"{p.parameters_m:.2f} M params, {gflops} GFLOPS, {p.fps:.2f} FPS"
        )
    print(f"table: {out_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override train.seed")
    common.add_argument("--output-dir", default=None, help="override output_dir")
    common.add_argument("--resume", action="store_true", help="reuse an existing run directory")

    parser = argparse.ArgumentParser(prog="lupidet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", parents=[common], help="materialize dataset, masks, split manifest")

    p_train = sub.add_parser("train", parents=[common], help="train one model")
    p_train.add_argument("--role", choices=("teacher", "student", "baseline"), required=True)
    p_train.add_argument("--alpha", type=float, default=None, help="override train.alpha")
    p_train.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p_train.add_argument("--teacher-ckpt", default=None, help="teacher checkpoint for students")

    p_sweep = sub.add_parser("sweep", parents=[common], help="train one student per alpha")
    p_sweep.add_argument("--epochs", type=int, default=None, help="override train.epochs")

    p_eval = sub.add_parser("evaluate", parents=[common], help="run COCO-style evaluation")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--split", choices=SPLITS, default=None)
    p_eval.add_argument(
        "--oracle-detections",
        action="store_true",
        help="debug: score the ground truth against itself",
    )

    p_cam = sub.add_parser("gradcam", parents=[common], help="write heatmap overlays")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--image-ids", nargs="*", default=[])
    p_cam.add_argument("--split", choices=SPLITS, default=None)
    p_cam.add_argument("--colormap", default="hot")
    p_cam.add_argument("--dump-csv", action="store_true")

    p_prof = sub.add_parser("profile", parents=[common], help="measure runtime parity")
    p_prof.add_argument("--checkpoints", nargs="+", required=True)
    p_prof.add_argument("--repeats", type=int, default=10)
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
    "profile": cmd_profile,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            seed=args.seed,
            output_dir=args.output_dir,
            alpha=getattr(args, "alpha", None),
            epochs=getattr(args, "epochs", None),
        )
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary reports, never raises
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
