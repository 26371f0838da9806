"""Supervised adaptation loops: classification and segmentation fine-tuning.

Both loops share the same recipe: AdamW at a fixed learning rate (no
schedule), layer-wise geometric lr decay toward the input, per-epoch data
permutations and dropout keys from counter-based streams, strict float32
arithmetic, best-epoch checkpoint selection on the validation metric, and a
metrics CSV with rows `epoch,split,metric,value`. The pre-train projection
head never enters fine-tuning; the mask token is likewise excluded from the
optimizer so it stays exactly as the pre-training run left it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from . import autodiff as ad
from .autodiff import backward, no_grad, zero_grad
from .checkpoint import save_checkpoint
from .errors import ConfigError, ShapeError
from .heads import cls_forward, cls_loss, llrd_groups, make_cls_head, make_seg_decoder, seg_forward
from .metrics import (
    accuracy,
    auc_per_class,
    confusion_from_single_label,
    dice,
    jaccard,
    mean_auc,
    sensitivity,
)
from .optim import AdamWState, adamw_step
from .rng import STREAM_AUGMENT, stream_root
from .vit import ViT, vit_meta, vit_to_tensors


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


# -- classification -----------------------------------------------------------


def evaluate_cls(backbone: ViT, head, images, labels, task: str, batch_size: int = 64) -> dict:
    """Deterministic metrics on a labeled set (dropout off, no graph)."""
    logits = []
    with no_grad():
        for rows in _batches(images.shape[0], batch_size):
            logits.append(cls_forward(backbone, head, images[rows]).value)
    logits = np.concatenate(logits, axis=0)

    out: dict[str, float] = {}
    if task == "multi":
        probs = expit(logits.astype(np.float64))
        aucs = auc_per_class(probs, np.asarray(labels))
        for k, a in enumerate(aucs):
            if a is not None:
                out[f"auc_{k}"] = a
        out["mauc"] = mean_auc(aucs)
    elif task == "single":
        ids = np.asarray(labels)
        pred = logits.argmax(axis=1)
        out["accuracy"] = accuracy(confusion_from_single_label(pred, ids))
        probs = softmax(logits.astype(np.float64), axis=1)
        for c in range(logits.shape[1]):
            tp = int(((pred == c) & (ids == c)).sum())
            fn = int(((pred != c) & (ids == c)).sum())
            if tp + fn > 0:
                out[f"sensitivity_{c}"] = tp / (tp + fn)
        aucs = auc_per_class(probs, np.eye(logits.shape[1])[ids])
        defined = [a for a in aucs if a is not None]
        if defined:
            out["mauc"] = mean_auc(aucs)
    else:
        raise ConfigError(f"task must be 'multi' or 'single', got {task!r}")
    return out


@dataclass
class FinetuneResult:
    checkpoint_path: Path
    best_epoch: int
    best_metric: float
    history: list[dict]  # one entry per epoch: {"train_loss":…, "val":{…}}


def _write_report_row(writer, epoch: int, split: str, metric: str, value: float) -> None:
    writer.writerow([epoch, split, metric, repr(float(value))])


def finetune_cls(
    backbone: ViT,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    ckpt_path,
    report_path,
    *,
    task: str = "multi",
    epochs: int,
    batch_size: int = 128,
    lr: float = 1e-3,
    llrd_decay: float = 0.55,
    dropout_p: float = 0.2,
    weight_decay: float = 0.0,
    seed: int = 0,
    augment_fn=None,
    norm_stats: tuple[float, float] | None = None,
    extra_meta: dict | None = None,
) -> FinetuneResult:
    """Train head + backbone; keep the epoch with the best validation metric.

    Selection metric: mean AUC for multi-label, accuracy for single-label.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    n = train_images.shape[0]
    if task == "multi":
        if train_labels.ndim != 2:
            raise ShapeError(f"multi-label matrix must be [N, K], got {train_labels.shape}")
        n_classes = train_labels.shape[1]
    else:
        n_classes = int(max(train_labels.max(), val_labels.max())) + 1
        if n_classes < 2:
            n_classes = 2
    head = make_cls_head(backbone.config.dim, n_classes, seed)
    groups = llrd_groups(backbone, head, llrd_decay)
    trained = {p.name: p for g in groups for p in g.params}
    state = AdamWState()
    aug_root = stream_root(seed, STREAM_AUGMENT)
    select_on = "mauc" if task == "multi" else "accuracy"

    best = (-math.inf, -1, None)
    history = []
    ckpt_path, report_path = Path(ckpt_path), Path(report_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.parent.mkdir(parents=True, exist_ok=True)

    with report_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "metric", "value"])
        for epoch in range(epochs):
            order = aug_root.child("order", epoch).permutation(n)
            losses = []
            for step, start in enumerate(range(0, n, batch_size)):
                rows = order[start : start + batch_size]
                batch = []
                for row in rows:
                    img = train_images[row]
                    if augment_fn is not None:
                        gen = aug_root.child("sample", epoch, int(row)).generator()
                        img = augment_fn(gen, img)
                    batch.append(np.asarray(img, np.float32))
                logits = cls_forward(
                    backbone, head, np.stack(batch),
                    train=True, dropout_p=dropout_p,
                    dropout_key=aug_root.child("dropout", epoch, step).key,
                )
                loss = cls_loss(logits, np.asarray(train_labels)[rows], task)
                ad.check_loss_finite(loss, f"fine-tune epoch {epoch} step {step}")
                backward(loss)
                grads = {name: p.grad for name, p in trained.items()}
                adamw_step(groups, grads, state, lr, weight_decay=weight_decay)
                zero_grad(trained.values())
                losses.append(float(loss.value))

            train_loss = float(np.mean(losses))
            val = evaluate_cls(backbone, head, val_images, val_labels, task)
            _write_report_row(writer, epoch, "train", "loss", train_loss)
            for name, value in sorted(val.items()):
                _write_report_row(writer, epoch, "val", name, value)
            history.append({"train_loss": train_loss, "val": val})
            if val[select_on] > best[0]:
                snap = {name: p.value.copy() for name, p in backbone.params.items()}
                snap.update({name: p.value.copy() for name, p in head.items()})
                best = (val[select_on], epoch, snap)

    metric_value, best_epoch, snap = best
    tensors = {f"vit.{name}": snap[name] for name in backbone.params}
    tensors["head.w"] = snap["head.w"]
    tensors["head.b"] = snap["head.b"]
    meta = {
        "kind": "finetune_cls",
        "task": task,
        "n_classes": n_classes,
        "vit": vit_meta(backbone.config),
        "dropout_p": dropout_p,
        "best_epoch": best_epoch,
        "best_metric": metric_value,
        "select_on": select_on,
        "seed": seed,
    }
    if norm_stats is not None:
        meta["norm"] = {"mean": float(norm_stats[0]), "std": float(norm_stats[1])}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(ckpt_path, tensors, meta)
    return FinetuneResult(ckpt_path, best_epoch, metric_value, history)


# -- segmentation --------------------------------------------------------------


def _check_seg_shapes(images: np.ndarray, masks: np.ndarray, num_classes: int) -> None:
    if masks.shape[0] != images.shape[0] or masks.shape[-2:] != images.shape[-2:]:
        raise ShapeError(
            f"masks {masks.shape} do not match images {images.shape} in count or size"
        )
    if masks.min() < 0 or masks.max() >= num_classes:
        raise ShapeError(f"mask values must lie in [0, {num_classes})")


def evaluate_seg(backbone: ViT, decoder, images, masks, batch_size: int = 4) -> dict:
    """Mean per-image foreground Dice/Jaccard of argmax predictions."""
    dices, jaccards = [], []
    with no_grad():
        for rows in _batches(images.shape[0], batch_size):
            logits = seg_forward(backbone, decoder, images[rows]).value
            pred = logits.argmax(axis=1)
            for p, g in zip(pred, masks[rows]):
                dices.append(dice((p > 0).astype(int), (g > 0).astype(int)))
                jaccards.append(jaccard((p > 0).astype(int), (g > 0).astype(int)))
    return {"dice": float(np.mean(dices)), "jaccard": float(np.mean(jaccards))}


def _pixel_ce(logits, mask_ids: np.ndarray, num_classes: int):
    b, k, h, w = logits.shape
    flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (b * h * w, k))
    onehot = np.eye(num_classes, dtype=np.float32)[mask_ids.reshape(-1)]
    return ad.softmax_cross_entropy(flat, onehot)


def finetune_seg(
    backbone: ViT,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    val_images: np.ndarray,
    val_masks: np.ndarray,
    ckpt_path,
    report_path,
    *,
    iterations: int,
    batch_size: int = 8,
    num_classes: int = 2,
    decoder_dim: int = 256,
    lr: float = 2e-4,
    llrd_decay: float = 0.85,
    weight_decay: float = 0.0,
    seed: int = 0,
    eval_every: int | None = None,
    norm_stats: tuple[float, float] | None = None,
    extra_meta: dict | None = None,
) -> FinetuneResult:
    """Iteration-based per-pixel cross-entropy training of backbone + decoder.

    The report's epoch column carries the iteration count at each evaluation
    point. Best checkpoint by validation Dice.
    """
    _check_seg_shapes(train_images, train_masks, num_classes)
    _check_seg_shapes(val_images, val_masks, num_classes)
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    eval_every = eval_every or iterations

    decoder = make_seg_decoder(backbone.config.dim, decoder_dim, num_classes, seed)
    groups = llrd_groups(backbone, decoder, llrd_decay)
    trained = {p.name: p for g in groups for p in g.params}
    state = AdamWState()
    aug_root = stream_root(seed, STREAM_AUGMENT)

    n = train_images.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    best = (-math.inf, -1, None)
    history = []
    ckpt_path, report_path = Path(ckpt_path), Path(report_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.parent.mkdir(parents=True, exist_ok=True)

    with report_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "metric", "value"])
        order = None
        losses = []
        for it in range(iterations):
            epoch, pos = divmod(it, steps_per_epoch)
            if pos == 0:
                order = aug_root.child("order", epoch).permutation(n)
            rows = order[pos * batch_size : (pos + 1) * batch_size]
            logits = seg_forward(backbone, decoder, train_images[rows])
            loss = _pixel_ce(logits, train_masks[rows], num_classes)
            ad.check_loss_finite(loss, f"segmentation iteration {it}")
            backward(loss)
            grads = {name: p.grad for name, p in trained.items()}
            adamw_step(groups, grads, state, lr, weight_decay=weight_decay)
            zero_grad(trained.values())
            losses.append(float(loss.value))

            if (it + 1) % eval_every == 0 or it + 1 == iterations:
                val = evaluate_seg(backbone, decoder, val_images, val_masks)
                train_loss = float(np.mean(losses))
                losses = []
                _write_report_row(writer, it + 1, "train", "loss", train_loss)
                for name, value in sorted(val.items()):
                    _write_report_row(writer, it + 1, "val", name, value)
                history.append({"iteration": it + 1, "train_loss": train_loss, "val": val})
                if val["dice"] > best[0]:
                    snap = {name: p.value.copy() for name, p in backbone.params.items()}
                    snap.update({name: p.value.copy() for name, p in decoder.items()})
                    best = (val["dice"], it + 1, snap)

    metric_value, best_iter, snap = best
    tensors = {f"vit.{name}": snap[name] for name in backbone.params}
    for name in decoder:
        tensors[name] = snap[name]
    meta = {
        "kind": "finetune_seg",
        "num_classes": num_classes,
        "decoder_dim": decoder_dim,
        "vit": vit_meta(backbone.config),
        "best_iteration": best_iter,
        "best_metric": metric_value,
        "seed": seed,
    }
    if norm_stats is not None:
        meta["norm"] = {"mean": float(norm_stats[0]), "std": float(norm_stats[1])}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(ckpt_path, tensors, meta)
    return FinetuneResult(ckpt_path, best_iter, metric_value, history)
