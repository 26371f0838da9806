"""Command bodies behind the CLI.

Imported lazily by cli.main after the thread environment variables are
pinned, so numpy's thread pools honor --threads. Each run_* function takes
the resolved config plus the prepared output directory and returns the
process exit code (0 on success; failures raise and the CLI maps them to
exit codes by error category).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Param
from .checkpoint import load_checkpoint
from .config import RunConfig
from .datasets import (
    cache_side,
    check_image_size,
    image_stack,
    label_matrix,
    load_any_manifest,
    loc_arrays,
    make_augment,
    mask_stack,
    normalize_batch,
    rows_for_split,
    single_ids,
    train_mean_std,
)
from .errors import DataError, IntegrityError
from .finetune import evaluate_cls, evaluate_seg, finetune_cls, finetune_seg
from .heads import seg_decoder_shapes
from .imaging import corpus_stats, decode_image, normalize, resize_bilinear
from .interpret import attention_query_map, grad_cam, render_heatmap
from .manifest import load_cls_manifest, load_loc_manifest, load_seg_manifest, subsample_train
from .metrics import cam_localize, write_localization_report
from .pretrain import pretrain_run
from .synth import generate_corpus
from .vit import ViT, preset_config, vit_from_parts


# -- checkpoint plumbing -------------------------------------------------------


def _read_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _backbone_from(tensors, meta, path) -> ViT:
    if "vit" not in meta:
        raise IntegrityError(f"{path}: checkpoint metadata lacks a backbone config")
    return vit_from_parts(tensors, meta["vit"])


def _cls_parts(tensors, meta, path):
    if meta.get("kind") != "finetune_cls":
        raise DataError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    backbone = _backbone_from(tensors, meta, path)
    head = {}
    for key in ("head.w", "head.b"):
        if key not in tensors:
            raise IntegrityError(f"{path}: checkpoint missing tensor '{key}'")
        head[key] = Param(tensors[key], key)
    return backbone, head


def _seg_parts(tensors, meta, path):
    if meta.get("kind") != "finetune_seg":
        raise DataError(f"{path}: not a segmentation checkpoint (kind={meta.get('kind')!r})")
    backbone = _backbone_from(tensors, meta, path)
    shapes = seg_decoder_shapes(
        backbone.config.dim, int(meta["decoder_dim"]), int(meta["num_classes"])
    )
    decoder = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise IntegrityError(f"{path}: checkpoint missing tensor '{name}'")
        if tuple(tensors[name].shape) != tuple(shape):
            raise IntegrityError(f"{path}: tensor '{name}' has the wrong shape")
        decoder[name] = Param(tensors[name], name)
    return backbone, decoder


def _norm_of(meta) -> tuple[float, float]:
    norm = meta.get("norm")
    if norm is None:
        return 0.0, 1.0
    return float(norm["mean"]), float(norm["std"])


def _eval_side(meta) -> int:
    return int(meta.get("image_size", meta["vit"]["grid"] * meta["vit"]["patch"]))


def _write_metrics_csv(path, metrics: dict) -> None:
    lines = ["metric,value"]
    for name in sorted(metrics):
        lines.append(f"{name},{metrics[name]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- data prep -----------------------------------------------------------------


def _fractioned(rows, cfg: RunConfig):
    fraction = cfg.get("data_fraction", 1.0)
    if fraction < 1.0:
        rows = subsample_train(rows, fraction, cfg["seed"])
    return rows


def _init_backbone(cfg: RunConfig, grid: int):
    """Warm-start from --ckpt when given, otherwise a seeded random preset."""
    if cfg.get("ckpt"):
        tensors, meta = _read_ckpt(cfg["ckpt"])
        backbone = _backbone_from(tensors, meta, cfg["ckpt"])
        return backbone, meta.get("norm")
    return ViT.build(preset_config(cfg["preset"], grid=grid), cfg["seed"]), None


# -- commands ------------------------------------------------------------------


def run_synth(cfg: RunConfig, out: Path) -> int:
    manifest = generate_corpus(
        out, cfg["task"], cfg["count"], size=cfg["size"], seed=cfg["seed"], noise=cfg["noise"]
    )
    print(f"synth: wrote {cfg['count']} {cfg['task']} images under {out}")
    print(f"manifest: {manifest}")
    return 0


def run_stats(cfg: RunConfig, out: Path | None) -> int:
    rows, _ = load_any_manifest(cfg["manifest"])
    train = rows_for_split(rows, "train")
    mean, std = corpus_stats(decode_image(r.path) for r in train)
    print(f"pixels: train split, {len(train)} images")
    print(f"mean = {mean!r}")
    print(f"std = {std!r}")
    if out is not None:
        _write_metrics_csv(out / "reports" / "stats.csv", {"mean": mean, "std": std})
    return 0


def run_pretrain(cfg: RunConfig, out: Path) -> int:
    side = check_image_size(cfg["image_size"])
    grid = side // 16
    tok_tensors, tok_meta = _read_ckpt(cfg["tokenizer_ckpt"])
    tokenizer = _backbone_from(tok_tensors, tok_meta, cfg["tokenizer_ckpt"])

    rows, _ = load_any_manifest(cfg["manifest"])
    train = rows_for_split(_fractioned(rows, cfg), "train")
    paths = [r.path for r in train]
    stats = train_mean_std(paths, side)
    if cfg["augment"]:
        images = image_stack(paths, cache_side(side))
        augment_fn = make_augment(side, cfg["crop_scale_min"], *stats)
    else:
        images = normalize_batch(image_stack(paths, side), *stats)
        augment_fn = None

    student = ViT.build(preset_config(cfg["preset"], grid=grid), cfg["seed"])
    result = pretrain_run(
        student,
        tokenizer,
        images,
        out / "checkpoints" / "pretrain.ckpt",
        out / "reports" / "pretrain_curve.csv",
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        min_lr=cfg["min_lr"],
        weight_decay=cfg["weight_decay"],
        mask_ratio=cfg["mask_ratio"],
        seed=cfg["seed"],
        augment_fn=augment_fn,
        input_side=side,
        norm_stats=stats,
        extra_meta={"image_size": side},
    )
    print(f"pretrain: {len(train)} images, {result.losses.size} steps")
    print(f"loss: first = {float(result.losses[0])!r}, last = {float(result.losses[-1])!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def run_finetune_cls(cfg: RunConfig, out: Path) -> int:
    side = check_image_size(cfg["image_size"])
    rows, n_classes = load_cls_manifest(cfg["manifest"])
    rows = _fractioned(rows, cfg)
    train, val = rows_for_split(rows, "train"), rows_for_split(rows, "val")

    backbone, ckpt_norm = _init_backbone(cfg, side // 16)
    paths = [r.path for r in train]
    # a warm start carries its pre-training normalization with it
    stats = (ckpt_norm["mean"], ckpt_norm["std"]) if ckpt_norm else train_mean_std(paths, side)

    train_y = label_matrix(train, cfg["uncertain_label"])
    val_y = label_matrix(val, cfg["uncertain_label"])
    if cfg["task"] == "single":
        train_y, val_y = single_ids(train_y), single_ids(val_y)

    if cfg["augment"]:
        train_x = image_stack(paths, cache_side(side))
        augment_fn = make_augment(side, cfg["crop_scale_min"], *stats)
    else:
        train_x = normalize_batch(image_stack(paths, side), *stats)
        augment_fn = None
    val_x = normalize_batch(image_stack([r.path for r in val], side), *stats)

    result = finetune_cls(
        backbone,
        train_x,
        train_y,
        val_x,
        val_y,
        out / "checkpoints" / "finetune_cls.ckpt",
        out / "reports" / "finetune_cls.csv",
        task=cfg["task"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        llrd_decay=cfg["llrd_decay"],
        dropout_p=cfg["dropout"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        augment_fn=augment_fn,
        norm_stats=stats,
        extra_meta={"image_size": side},
    )
    print(f"finetune-cls: {len(train)} train / {len(val)} val images, {n_classes} classes")
    print(f"best epoch {result.best_epoch}: {result.best_metric!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def run_finetune_seg(cfg: RunConfig, out: Path) -> int:
    side = check_image_size(cfg["image_size"])
    rows = _fractioned(load_seg_manifest(cfg["manifest"]), cfg)
    train, val = rows_for_split(rows, "train"), rows_for_split(rows, "val")

    backbone, ckpt_norm = _init_backbone(cfg, side // 16)
    paths = [r.path for r in train]
    stats = (ckpt_norm["mean"], ckpt_norm["std"]) if ckpt_norm else train_mean_std(paths, side)

    train_x = normalize_batch(image_stack(paths, side), *stats)
    val_x = normalize_batch(image_stack([r.path for r in val], side), *stats)
    train_m = mask_stack(train, side)
    val_m = mask_stack(val, side)

    result = finetune_seg(
        backbone,
        train_x,
        train_m,
        val_x,
        val_m,
        out / "checkpoints" / "finetune_seg.ckpt",
        out / "reports" / "finetune_seg.csv",
        iterations=cfg["iterations"],
        batch_size=cfg["batch_size"],
        num_classes=cfg["num_classes"],
        decoder_dim=cfg["decoder_dim"],
        lr=cfg["lr"],
        llrd_decay=cfg["llrd_decay"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        norm_stats=stats,
        extra_meta={"image_size": side},
    )
    print(f"finetune-seg: {len(train)} train / {len(val)} val pairs at {side}x{side}")
    print(f"best iteration {result.best_epoch}: dice {result.best_metric!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def run_eval_cls(cfg: RunConfig, out: Path) -> int:
    tensors, meta = _read_ckpt(cfg["ckpt"])
    backbone, head = _cls_parts(tensors, meta, cfg["ckpt"])
    side = _eval_side(meta)
    task = meta["task"]

    rows, n_classes = load_cls_manifest(cfg["manifest"])
    if task == "multi" and n_classes != meta["n_classes"]:
        raise DataError(
            f"manifest has {n_classes} label classes, checkpoint expects {meta['n_classes']}"
        )
    picked = rows_for_split(rows, cfg["split"])
    labels = label_matrix(picked, cfg["uncertain_label"])
    if task == "single":
        labels = single_ids(labels)
        if labels.max() >= meta["n_classes"]:
            raise DataError(f"label id {labels.max()} outside checkpoint's classes")
    images = normalize_batch(image_stack([r.path for r in picked], side), *_norm_of(meta))

    metrics = evaluate_cls(backbone, head, images, labels, task, batch_size=cfg["batch_size"])
    _write_metrics_csv(out / "reports" / "eval_cls.csv", metrics)
    print(f"eval-cls: {len(picked)} images from split {cfg['split']!r}")
    for name in sorted(metrics):
        print(f"{name} = {metrics[name]!r}")
    return 0


def run_eval_seg(cfg: RunConfig, out: Path) -> int:
    tensors, meta = _read_ckpt(cfg["ckpt"])
    backbone, decoder = _seg_parts(tensors, meta, cfg["ckpt"])
    side = _eval_side(meta)

    picked = rows_for_split(load_seg_manifest(cfg["manifest"]), cfg["split"])
    images = normalize_batch(image_stack([r.path for r in picked], side), *_norm_of(meta))
    masks = mask_stack(picked, side)

    metrics = evaluate_seg(backbone, decoder, images, masks, batch_size=cfg["batch_size"])
    _write_metrics_csv(out / "reports" / "eval_seg.csv", metrics)
    print(f"eval-seg: {len(picked)} pairs from split {cfg['split']!r}")
    for name in sorted(metrics):
        print(f"{name} = {metrics[name]!r}")
    return 0


def run_cam(cfg: RunConfig, out: Path) -> int:
    tensors, meta = _read_ckpt(cfg["ckpt"])
    backbone, head = _cls_parts(tensors, meta, cfg["ckpt"])
    side = _eval_side(meta)
    mean, std = _norm_of(meta)

    picked = rows_for_split(load_loc_manifest(cfg["manifest"]), cfg["split"])
    images, boxes, labels = loc_arrays(picked, side)
    normed = normalize_batch(images, mean, std)

    cams = []
    constant = 0
    for i in range(len(picked)):
        target = labels[i] if cfg["target_class"] < 0 else cfg["target_class"]
        hm = grad_cam(backbone, head, normed[i], target)
        constant += int(hm.constant)
        cams.append(hm.normalized)
        if cfg["figures"]:
            render_heatmap(
                hm, images[i, 0], out / "figures" / f"cam_{i:05d}_c{target}.png", cfg["alpha"]
            )

    result = cam_localize(np.stack(cams), boxes)
    write_localization_report(out / "reports" / "localization.csv", result)
    print(f"cam: {len(picked)} images from split {cfg['split']!r}, {constant} constant maps")
    print(f"pointing = {result.pointing!r}")
    print(f"best_t = {result.best_t!r}, iou = {result.iou_at_best!r}")
    print(f"ap25 = {result.ap25!r}, ap50 = {result.ap50!r}")
    return 0


def _parse_points(spec: str) -> list[tuple[int, int]]:
    from .errors import ConfigError

    points = []
    for chunk in spec.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError(f"points must be 'y,x' pairs joined by ';', got {chunk!r}")
        try:
            points.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ConfigError(f"point coordinates must be integers, got {chunk!r}") from None
    return points


def run_attn(cfg: RunConfig, out: Path) -> int:
    from .errors import ConfigError

    tensors, meta = _read_ckpt(cfg["ckpt"])
    backbone = _backbone_from(tensors, meta, cfg["ckpt"])
    side = _eval_side(meta)
    mean, std = _norm_of(meta)

    raw = resize_bilinear(decode_image(cfg["image"]), side, side)
    normed = normalize(raw, mean, std)[None]

    depth = backbone.config.depth
    block = cfg["block"]
    if block < 0:
        block += depth
    if not 0 <= block < depth:
        raise ConfigError(f"block {cfg['block']} outside depth {depth}")

    points = _parse_points(cfg["points"])
    for y, x in points:
        hm = attention_query_map(backbone, normed, (y, x), block)
        render_heatmap(hm, raw, out / "figures" / f"attn_b{block}_y{y}x{x}.png", cfg["alpha"])
    print(f"attn: {len(points)} maps from block {block} under {out / 'figures'}")
    return 0


RUNNERS = {
    "pretrain": run_pretrain,
    "finetune-cls": run_finetune_cls,
    "finetune-seg": run_finetune_seg,
    "eval-cls": run_eval_cls,
    "eval-seg": run_eval_seg,
    "cam": run_cam,
    "attn": run_attn,
    "synth": run_synth,
    "stats": run_stats,
}


def run(cfg: RunConfig, out: Path | None) -> int:
    return RUNNERS[cfg.command](cfg, out)
