"""Explanation maps: gradient-weighted class activation and attention queries.

The class activation map lives on the token grid: take the last block's
output image tokens A [gh, gw, d], the gradient G of one class logit with
respect to them, form channel weights w_c = grid-mean of G[..., c], and keep
the positive part of sum_c w_c * A[..., c]. The grid map is min-max
normalized, bilinearly upsampled to image size, and normalized once more so
the final map attains exactly 0 and 1 (upsampling alone does not preserve
extrema unless they sit on grid corners). A constant grid carries no
ordering information; it becomes an all-zero map with a warning flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, backward
from .errors import ConfigError, ShapeError
from .heads import cls_forward
from .imaging import encode_rgb_png, resize_bilinear
from .vit import ForwardRecord, ViT


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # [gh, gw] raw values on the token grid
    normalized: np.ndarray  # [H, W] in [0, 1]
    constant: bool  # True when the raw grid had no dynamic range


def _normalize_unit(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr, dtype=np.float32), True
    return ((arr - lo) / (hi - lo)).astype(np.float32), False


def heatmap_from_grid(grid: np.ndarray, out_hw: tuple[int, int]) -> Heatmap:
    """Normalize a token-grid map and upsample it to image resolution."""
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise ShapeError(f"heatmap grid must be 2-d, got {grid.shape}")
    unit, constant = _normalize_unit(grid)
    if constant:
        return Heatmap(grid, np.zeros(out_hw, np.float32), True)
    up = resize_bilinear(unit, out_hw[0], out_hw[1])
    up, _ = _normalize_unit(up)
    return Heatmap(grid, up, False)


def cam_from_activations(A: np.ndarray, G: np.ndarray, out_hw: tuple[int, int]) -> Heatmap:
    """Gradient-weighted activation map from token activations + gradients."""
    A = np.asarray(A, np.float32)
    G = np.asarray(G, np.float32)
    if A.shape != G.shape or A.ndim != 3:
        raise ShapeError(f"activations {A.shape} vs gradients {G.shape}")
    weights = G.mean(axis=(0, 1))  # [d]
    cam = np.maximum((A * weights).sum(axis=-1), 0.0)
    return heatmap_from_grid(cam, out_hw)


def _single_image(image) -> np.ndarray:
    arr = np.asarray(image, np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"expected one [C, H, W] image, got {arr.shape}")
    return arr


def grad_cam(model: ViT, head, image, target_class: int) -> Heatmap:
    """Class activation heatmap for one image and one class logit."""
    arr = _single_image(image)
    n_classes = head["head.w"].shape[1]
    if not 0 <= target_class < n_classes:
        raise ConfigError(f"target_class {target_class} outside [0, {n_classes})")
    g = arr.shape[-1] // model.config.patch

    record = ForwardRecord()
    toks = model.forward_features(arr, record=record)
    pooled = model.pooled(toks)
    logits = ad.linear(pooled, head["head.w"], head["head.b"])
    root = ad.slice_(logits, ((0, 1), (target_class, target_class + 1)))
    backward(root)

    pre = record.pre_final
    off = 1 if model.config.use_class_token else 0
    A = pre.value[0, off:, :].reshape(g, g, model.config.dim)
    G = pre.grad[0, off:, :].reshape(g, g, model.config.dim)
    return cam_from_activations(A, G, (arr.shape[-2], arr.shape[-1]))


def attention_query_map(model: ViT, image, ref_point: tuple[int, int], block_index: int) -> Heatmap:
    """Head-averaged attention of the token at ref_point over image tokens.

    ref_point is (x, y) in pixels. Values are post-softmax probabilities, so
    they are nonnegative and sum to at most 1 (the class-token share of the
    query's attention is excluded from the map).
    """
    arr = _single_image(image)
    h, w = arr.shape[-2], arr.shape[-1]
    x, y = ref_point
    if not (0 <= x < w and 0 <= y < h):
        raise ConfigError(f"ref_point {ref_point} outside {w}x{h} image")
    if not 0 <= block_index < model.config.depth:
        raise ConfigError(f"block_index {block_index} outside depth {model.config.depth}")
    patch = model.config.patch
    g = w // patch

    record = ForwardRecord()
    with ad.no_grad():
        model.forward_features(arr, record=record)
    attn = record.attn[block_index].value  # [1, H, N, N]
    off = 1 if model.config.use_class_token else 0
    q = off + (y // patch) * g + (x // patch)
    probs = attn[0, :, q, off:].mean(axis=0)  # average heads, drop class key
    return heatmap_from_grid(probs.reshape(g, g), (h, w))


# -- rendering -----------------------------------------------------------------


def colormap_cold_hot(values: np.ndarray) -> np.ndarray:
    """Two-stop blue-to-red map: v=0 -> (0,0,1), v=1 -> (1,0,0)."""
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)
    out = np.zeros(v.shape + (3,), np.float64)
    out[..., 0] = v
    out[..., 2] = 1.0 - v
    return out


def render_heatmap(heatmap: Heatmap, base_image: np.ndarray, out_path, alpha: float = 0.5) -> None:
    """Blend the normalized map over a grayscale base and write an RGB PNG."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    base = np.asarray(base_image, np.float64)
    if base.ndim != 2:
        raise ShapeError(f"base image must be [H, W] grayscale, got {base.shape}")
    if base.shape != heatmap.normalized.shape:
        raise ShapeError(
            f"heatmap {heatmap.normalized.shape} does not cover base {base.shape}"
        )
    base_rgb = np.repeat(base[..., None], 3, axis=-1)
    overlay = colormap_cold_hot(heatmap.normalized)
    blended = (1.0 - alpha) * base_rgb + alpha * overlay
    encode_rgb_png(out_path, blended.astype(np.float32))
