"""Transfer heads: linear classifier and a pyramid + multi-scale fusion decoder.

Classification pools the backbone's image tokens and applies dropout plus a
single linear layer. Segmentation first expands the single-scale token grid
(1/16 of input) into a four-level pyramid (1/4, 1/8, 1/16, 1/32) with two
transposed convolutions, an identity, and a max-pool, then fuses the levels:
pyramid pooling over the coarsest map, 1x1 lateral convolutions, top-down
additive fusion, per-level 3x3 convolutions, concatenation at 1/4 scale, a
1x1 classifier, and a bilinear upsample to the input resolution. Plain ReLU
nonlinearities throughout; no batch normalization anywhere, so training is
batch-size independent and exactly reproducible.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var
from .errors import ConfigError, ShapeError
from .optim import ParamGroup
from .rng import STREAM_INIT, stream_root
from .vit import ViT

PPM_BINS = (1, 2, 3, 6)


def _init_params(shapes: dict[str, tuple[int, ...]], seed: int) -> dict[str, Param]:
    stream = stream_root(seed, STREAM_INIT)
    return {
        name: Param(ViT.init_param(name, shape, stream), name)
        for name, shape in shapes.items()
    }


# -- classification -----------------------------------------------------------


def make_cls_head(dim: int, n_classes: int, seed: int) -> dict[str, Param]:
    if n_classes < 1:
        raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
    return _init_params({"head.w": (dim, n_classes), "head.b": (n_classes,)}, seed)


def cls_forward(
    backbone: ViT,
    head: dict[str, Param],
    images,
    *,
    train: bool = False,
    dropout_p: float = 0.0,
    dropout_key: int = 0,
) -> Var:
    """Class logits [B, K]: linear layer on dropout(mean-pooled features)."""
    dim = backbone.config.dim
    if head["head.w"].shape[0] != dim:
        raise ShapeError(
            f"head expects {head['head.w'].shape[0]}-d features, backbone yields {dim}"
        )
    pooled = backbone.pooled(backbone.forward_features(images))
    pooled = ad.dropout(pooled, dropout_p, dropout_key, train)
    return ad.linear(pooled, head["head.w"], head["head.b"])


def cls_loss(logits: Var, labels: np.ndarray, task: str) -> Var:
    """Multi-label mean sigmoid BCE, or single-label softmax cross-entropy.

    labels: multi -> [B, K] of 0/1; single -> [B] class ids (one-hot here).
    Uncertain (-1) labels must be mapped before reaching the loss.
    """
    if task == "multi":
        if labels.shape != logits.shape:
            raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
        return ad.sigmoid_bce(logits, labels.astype(np.float32))
    if task == "single":
        b, k = logits.shape
        ids = np.asarray(labels)
        if ids.shape != (b,):
            raise ShapeError(f"single-label ids must be [{b}], got {ids.shape}")
        if ids.min() < 0 or ids.max() >= k:
            raise ShapeError(f"class id outside [0, {k})")
        onehot = np.zeros((b, k), np.float32)
        onehot[np.arange(b), ids] = 1.0
        return ad.softmax_cross_entropy(logits, onehot)
    raise ConfigError(f"task must be 'multi' or 'single', got {task!r}")


# -- segmentation decoder -----------------------------------------------------


def seg_decoder_shapes(dim: int, decoder_dim: int, num_classes: int) -> dict[str, tuple[int, ...]]:
    d, dd = dim, decoder_dim
    shapes: dict[str, tuple[int, ...]] = {
        # token grid (1/16) -> 1/4 and 1/8 via stride-2 transposed convs
        "seg.up4.0.w": (d, d, 2, 2),
        "seg.up4.0.b": (d,),
        "seg.up4.1.w": (d, d, 2, 2),
        "seg.up4.1.b": (d,),
        "seg.up8.0.w": (d, d, 2, 2),
        "seg.up8.0.b": (d,),
    }
    for bin_ in PPM_BINS:
        shapes[f"seg.ppm.{bin_}.w"] = (dd, d, 1, 1)
        shapes[f"seg.ppm.{bin_}.b"] = (dd,)
    shapes["seg.ppm.fuse.w"] = (dd, d + len(PPM_BINS) * dd, 3, 3)
    shapes["seg.ppm.fuse.b"] = (dd,)
    for lvl in (4, 8, 16):
        shapes[f"seg.fpn.lat{lvl}.w"] = (dd, d, 1, 1)
        shapes[f"seg.fpn.lat{lvl}.b"] = (dd,)
        shapes[f"seg.fpn.out{lvl}.w"] = (dd, dd, 3, 3)
        shapes[f"seg.fpn.out{lvl}.b"] = (dd,)
    shapes["seg.cls.w"] = (num_classes, 4 * dd, 1, 1)
    shapes["seg.cls.b"] = (num_classes,)
    return shapes


def make_seg_decoder(dim: int, decoder_dim: int, num_classes: int, seed: int) -> dict[str, Param]:
    if num_classes < 2:
        raise ConfigError(f"segmentation needs >= 2 classes, got {num_classes}")
    return _init_params(seg_decoder_shapes(dim, decoder_dim, num_classes), seed)


def build_pyramid(grid_feats: Var, params: dict[str, Param]) -> list[Var]:
    """Four maps [1/4, 1/8, 1/16, 1/32] from a [B, d, g, g] token grid."""
    b, d, gh, gw = grid_feats.shape
    if gh != gw:
        raise ShapeError(f"token grid must be square, got {gh}x{gw}")
    if gh % 2:
        raise ShapeError(f"token grid side {gh} must be even for the 1/32 level")
    p8 = ad.conv_transpose2d(grid_feats, params["seg.up8.0.w"], params["seg.up8.0.b"], stride=2)
    p4 = ad.conv_transpose2d(grid_feats, params["seg.up4.0.w"], params["seg.up4.0.b"], stride=2)
    p4 = ad.conv_transpose2d(p4, params["seg.up4.1.w"], params["seg.up4.1.b"], stride=2)
    p32 = ad.max_pool2d(grid_feats, kernel=2)
    return [p4, p8, grid_feats, p32]


def upernet_forward(pyramid: list[Var], params: dict[str, Param], out_hw: tuple[int, int]) -> Var:
    """Per-pixel logits [B, num_classes, H, W] from a four-level pyramid."""
    p4, p8, p16, p32 = pyramid
    _, _, h32, w32 = p32.shape

    # pyramid pooling on the coarsest level
    pooled = [p32]
    for bin_ in PPM_BINS:
        t = ad.adaptive_avg_pool2d(p32, bin_, bin_)
        t = ad.relu(ad.conv2d(t, params[f"seg.ppm.{bin_}.w"], params[f"seg.ppm.{bin_}.b"]))
        pooled.append(ad.bilinear_resize_2d(t, h32, w32))
    top = ad.relu(
        ad.conv2d(ad.concat(pooled, axis=1), params["seg.ppm.fuse.w"],
                  params["seg.ppm.fuse.b"], padding=1)
    )

    # top-down additive fusion with 1x1 laterals, then per-level 3x3 convs
    fused = {32: top}
    for lvl, feats in ((16, p16), (8, p8), (4, p4)):
        lat = ad.conv2d(feats, params[f"seg.fpn.lat{lvl}.w"], params[f"seg.fpn.lat{lvl}.b"])
        _, _, lh, lw = lat.shape
        fused[lvl] = ad.add(lat, ad.bilinear_resize_2d(fused[lvl * 2], lh, lw))
    outs = []
    _, _, h4, w4 = fused[4].shape
    for lvl in (4, 8, 16):
        t = ad.relu(
            ad.conv2d(fused[lvl], params[f"seg.fpn.out{lvl}.w"],
                      params[f"seg.fpn.out{lvl}.b"], padding=1)
        )
        outs.append(t if lvl == 4 else ad.bilinear_resize_2d(t, h4, w4))
    outs.append(ad.bilinear_resize_2d(top, h4, w4))

    logits = ad.conv2d(ad.concat(outs, axis=1), params["seg.cls.w"], params["seg.cls.b"])
    return ad.bilinear_resize_2d(logits, out_hw[0], out_hw[1])


def seg_forward(backbone: ViT, decoder: dict[str, Param], images) -> Var:
    """End-to-end segmentation logits at input resolution."""
    arr = images.value if isinstance(images, Var) else np.asarray(images)
    h, w = arr.shape[-2], arr.shape[-1]
    g = h // backbone.config.patch
    toks = backbone.forward_features(images)
    grid = backbone.token_grid(toks, g)
    return upernet_forward(build_pyramid(grid, decoder), decoder, (h, w))


# -- layer-wise learning-rate decay -------------------------------------------


def _decayable(name: str) -> bool:
    # matrices decay; biases, norm gains and token/positional embeddings do not
    return name.endswith(".w")


def llrd_groups(
    backbone: ViT, head_params: dict[str, Param], decay: float
) -> list[ParamGroup]:
    """Geometric per-depth lr scales: head gets 1, earlier groups decay times.

    Group order is [embedding, block 0, ..., block L-1, head]; the scale of
    group g among G groups is decay^(G-1-g). The mask token is excluded: it
    plays no part in fine-tuning and must never receive updates there.
    """
    if not 0.0 < decay <= 1.0:
        raise ConfigError(f"llrd decay must be in (0, 1], got {decay}")
    depth = backbone.config.depth
    buckets: list[tuple[str, list[Param]]] = [("embed", [])]
    for i in range(depth):
        buckets.append((f"block{i}", []))
    buckets.append(("head", []))

    for name, p in backbone.params.items():
        if name == "mask_token":
            continue
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            buckets[1 + idx][1].append(p)
        elif name.startswith("final_norm."):
            buckets[-1][1].append(p)
        else:
            buckets[0][1].append(p)
    buckets[-1][1].extend(head_params.values())

    total = len(buckets)
    groups = []
    for g, (label, params) in enumerate(buckets):
        scale = float(decay ** (total - 1 - g))
        wd_on = [p for p in params if _decayable(p.name)]
        wd_off = [p for p in params if not _decayable(p.name)]
        if wd_on:
            groups.append(ParamGroup(label, wd_on, lr_scale=scale, weight_decay_enabled=True))
        if wd_off:
            groups.append(
                ParamGroup(label + ".nodecay", wd_off, lr_scale=scale, weight_decay_enabled=False)
            )
    return groups
