"""Self-supervised pre-training of the backbone by masked feature regression.

A fixed fraction of image tokens is replaced by a learned mask token; a
frozen teacher backbone (the "tokenizer") encodes the clean image; the
student is trained to make its features at the masked positions match the
teacher's, measured by cosine similarity after a linear projection into the
teacher's width. Only masked positions contribute to the loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var, backward, no_grad, zero_grad
from .checkpoint import save_checkpoint
from .errors import ConfigError, ShapeError
from .optim import AdamWState, ParamGroup, adamw_step, schedule_for_step
from .rng import STREAM_AUGMENT, STREAM_INIT, STREAM_MASK, stream_root
from .vit import ViT, vit_meta, vit_to_tensors


@dataclass(frozen=True)
class MaskPlan:
    """Which image-token indices of one sample are hidden."""

    indices: np.ndarray  # sorted unique ints, all < n_tokens
    ratio: float


def sample_mask(n: int, ratio: float, gen: np.random.Generator) -> MaskPlan:
    """Uniform random subset of exactly floor(n * ratio) token indices."""
    if n < 1:
        raise ConfigError(f"token count must be >= 1, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask_ratio must be in (0, 1), got {ratio}")
    k = int(math.floor(n * ratio))
    if k == 0:
        raise ConfigError(
            f"mask_ratio {ratio} masks zero of {n} tokens; the objective is degenerate"
        )
    indices = np.sort(gen.permutation(n)[:k]).astype(np.int64)
    return MaskPlan(indices=indices, ratio=ratio)


def masks_to_bool(plans: list[MaskPlan], n: int) -> np.ndarray:
    """Stack per-sample plans into a [B, n] boolean substitution mask."""
    out = np.zeros((len(plans), n), dtype=bool)
    for row, plan in enumerate(plans):
        idx = plan.indices
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"mask index out of range for {n} tokens")
        out[row, idx] = True
    return out


def tokenize_targets(tokenizer: ViT, images: np.ndarray, expected_grid: int | None = None) -> np.ndarray:
    """Frozen-teacher image-token features [B, n, d_t] for clean images.

    Runs without graph recording, so no gradient can ever reach the teacher.
    """
    side = images.shape[-1]
    if side % tokenizer.config.patch:
        raise ConfigError(
            f"tokenizer patch {tokenizer.config.patch} does not divide image side {side}"
        )
    g = side // tokenizer.config.patch
    if expected_grid is not None and g != expected_grid:
        raise ConfigError(
            f"tokenizer token grid {g}x{g} does not match student grid "
            f"{expected_grid}x{expected_grid}; masked positions would not correspond"
        )
    with no_grad():
        toks = tokenizer.forward_features(images)
        return tokenizer.image_tokens(toks).value.copy()


def make_projection(dim: int, target_dim: int, seed: int) -> dict[str, Param]:
    """Student-width to teacher-width linear map, trained jointly."""
    stream = stream_root(seed, STREAM_INIT)
    w = ViT.init_param("mim_proj.w", (dim, target_dim), stream)
    b = np.zeros((target_dim,), np.float32)
    return {"mim_proj.w": Param(w, "mim_proj.w"), "mim_proj.b": Param(b, "mim_proj.b")}


def mim_loss(student_tokens: Var, targets: np.ndarray, mask: np.ndarray, proj_w, proj_b) -> Var:
    """1 - mean cosine similarity over masked positions.

    student_tokens: [B, n, d] image-token features from the masked forward.
    targets: [B, n, d_t] frozen teacher features for the clean images.
    mask: [B, n] bool, True where a token was substituted.

    Range [0, 2]; 0 iff every projected masked feature equals its target.
    """
    b, n, d = student_tokens.shape
    if targets.shape[:2] != (b, n):
        raise ShapeError(f"targets {targets.shape} do not align with tokens {(b, n, d)}")
    if mask.shape != (b, n) or mask.dtype != bool:
        raise ShapeError(f"mask must be bool [{b}, {n}], got {mask.shape} {mask.dtype}")
    k = int(mask.sum())
    if k == 0:
        raise ConfigError("empty mask: no positions contribute to the loss")
    projected = ad.linear(student_tokens, proj_w, proj_b)
    cos = ad.cosine_rows(projected, Var(np.asarray(targets, np.float32)))
    # unmasked rows are multiplied by exactly 0.0, so they contribute neither
    # value nor gradient; rescale the global mean to a mean over masked rows
    masked = ad.mul(cos, Var(mask.astype(np.float32)))
    mean_all = ad.mean(ad.reshape(masked, (b * n,)), axis=0)
    mean_masked = ad.mul(mean_all, float(b * n) / float(k))
    return ad.sub(Var(np.float32(1.0)), mean_masked)


@dataclass
class PretrainResult:
    checkpoint_path: Path
    losses: np.ndarray  # per step
    lrs: np.ndarray


def pretrain_run(
    student: ViT,
    tokenizer: ViT,
    images: np.ndarray,
    ckpt_path,
    curve_path,
    *,
    epochs: int,
    batch_size: int,
    base_lr: float = 3e-4,
    min_lr: float = 0.0,
    weight_decay: float = 0.0,
    mask_ratio: float = 0.3,
    seed: int = 0,
    augment_fn=None,
    input_side: int | None = None,
    norm_stats: tuple[float, float] | None = None,
    extra_meta: dict | None = None,
) -> PretrainResult:
    """Full pre-training loop over an in-memory image array [N, C, H, W].

    When augment_fn crops to a different resolution than the stored images
    (e.g. a 1.5x cache), input_side must name the side length the model
    actually sees, since the token grid and mask geometry derive from it.

    Deterministic for a fixed seed: data order, augmentation and per-sample
    masks all derive from counter-based streams keyed by (epoch, sample row),
    and every numeric step is single-threaded float32.
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    n_images = images.shape[0]
    if n_images < 1:
        raise ConfigError("no images to pre-train on")
    side = input_side if input_side is not None else images.shape[-1]
    patch = student.config.patch
    if side % patch:
        raise ShapeError(f"image side {side} not divisible by patch {patch}")
    g = side // patch
    n_tok = g * g
    d_t = tokenizer.config.dim

    proj = make_projection(student.config.dim, d_t, seed)
    params = dict(student.params)
    params.update(proj)
    groups = [ParamGroup("all", list(params.values()), lr_scale=1.0)]
    state = AdamWState()

    mask_root = stream_root(seed, STREAM_MASK)
    aug_root = stream_root(seed, STREAM_AUGMENT)
    steps_per_epoch = math.ceil(n_images / batch_size)
    total_steps = epochs * steps_per_epoch

    ckpt_path = Path(ckpt_path)
    curve_path = Path(curve_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    curve_path.parent.mkdir(parents=True, exist_ok=True)

    losses, lrs = [], []
    step = 0
    with curve_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for epoch in range(epochs):
            order = aug_root.child("order", epoch).permutation(n_images)
            for start in range(0, n_images, batch_size):
                rows = order[start : start + batch_size]
                batch = []
                for row in rows:
                    img = images[row]
                    if augment_fn is not None:
                        gen = aug_root.child("sample", epoch, int(row)).generator()
                        img = augment_fn(gen, img)
                    batch.append(np.asarray(img, np.float32))
                batch_arr = np.stack(batch)

                plans = [
                    sample_mask(n_tok, mask_ratio, mask_root.child(epoch, int(row)).generator())
                    for row in rows
                ]
                mask = masks_to_bool(plans, n_tok)

                targets = tokenize_targets(tokenizer, batch_arr, expected_grid=g)
                toks = student.forward_features(batch_arr, mask=mask)
                loss = mim_loss(
                    student.image_tokens(toks), targets, mask,
                    proj["mim_proj.w"], proj["mim_proj.b"],
                )
                ad.check_loss_finite(loss, f"pre-training step {step}")
                backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                lr = schedule_for_step(step, total_steps, base_lr, min_lr)
                adamw_step(groups, grads, state, lr, weight_decay=weight_decay)
                zero_grad(params.values())

                loss_val = float(loss.value)
                writer.writerow([step, repr(lr), repr(loss_val)])
                losses.append(loss_val)
                lrs.append(lr)
                step += 1

    meta = {
        "kind": "pretrain",
        "vit": vit_meta(student.config),
        "mim_proj": {"in": student.config.dim, "out": d_t},
        "seed": seed,
        "epochs": epochs,
        "steps": total_steps,
        "mask_ratio": mask_ratio,
        "base_lr": base_lr,
    }
    if norm_stats is not None:
        meta["norm"] = {"mean": float(norm_stats[0]), "std": float(norm_stats[1])}
    if extra_meta:
        meta.update(extra_meta)
    tensors = vit_to_tensors(student)
    tensors["mim_proj.w"] = proj["mim_proj.w"].value
    tensors["mim_proj.b"] = proj["mim_proj.b"].value
    save_checkpoint(ckpt_path, tensors, meta)
    return PretrainResult(ckpt_path, np.asarray(losses), np.asarray(lrs))
