"""Manifest-to-array assembly shared by the CLI commands.

The training pipeline is: decode each image once, resize it to a cached
base resolution, then (when augmentation is on) crop/flip/normalize per
sample with a counter-based generator. The cached base is 1.5x the model
input size, mirroring the 336 -> 224 geometry of the crop pipeline at any
scale. Masks are resized nearest-neighbor so label ids are never blended,
and boxes are rescaled conservatively (floor/ceil) so they stay tight
covers of the shape in the resized frame.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DataError
from .imaging import (
    corpus_stats,
    decode_image,
    flip_coin,
    hflip,
    normalize,
    random_resized_crop,
    resize_bilinear,
    resize_nearest,
)
from .manifest import load_cls_manifest, load_loc_manifest, load_seg_manifest


def cache_side(image_size: int) -> int:
    return (image_size * 3) // 2


def check_image_size(image_size: int, patch: int = 16) -> int:
    if image_size % patch != 0:
        raise ConfigError(f"image_size must be divisible by {patch}, got {image_size}")
    return image_size


def load_any_manifest(path):
    """Sniff the header and dispatch; returns (rows, kind)."""
    try:
        with open(path, newline="") as fh:
            header = fh.readline().strip()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if header.startswith("path,split,label_0"):
        rows, _ = load_cls_manifest(path)
        return rows, "cls"
    if header == "path,split,mask_path":
        return load_seg_manifest(path), "seg"
    if header.startswith("path,split,label,box_x0"):
        return load_loc_manifest(path), "loc"
    raise DataError(f"{path}: unrecognized manifest header {header!r}")


def rows_for_split(rows: list, split: str) -> list:
    picked = [r for r in rows if r.split == split]
    if not picked:
        raise DataError(f"manifest has no rows in split {split!r}")
    return picked


def image_stack(paths, side: int) -> np.ndarray:
    """Decode + bilinear-resize to [N, 1, side, side] float32 in [0, 1]."""
    return np.stack([resize_bilinear(decode_image(p), side, side)[None] for p in paths])


def train_mean_std(paths, side: int) -> tuple[float, float]:
    """Corpus stats over the train images at the resolution the model sees."""
    return corpus_stats(resize_bilinear(decode_image(p), side, side) for p in paths)


def label_matrix(rows, uncertain: str) -> np.ndarray:
    """[N, K] in {0,1}; uncertain (-1) entries map per the configured policy."""
    mat = np.array([r.labels for r in rows], dtype=np.int64)
    fill = 1 if uncertain == "one" else 0
    return np.where(mat == -1, fill, mat)


def single_ids(labels: np.ndarray) -> np.ndarray:
    """Collapse one-hot rows to class ids; anything non-one-hot is rejected."""
    bad = np.nonzero(labels.sum(axis=1) != 1)[0]
    if bad.size:
        raise DataError(f"single-label task needs one-hot rows; row {int(bad[0])} is not")
    return labels.argmax(axis=1)


def mask_stack(rows, side: int) -> np.ndarray:
    """[N, side, side] int64 class ids from 0/255 mask PNGs."""
    out = []
    for r in rows:
        ids = (decode_image(r.mask_path) > 0.5).astype(np.int64)
        out.append(resize_nearest(ids, side, side))
    return np.stack(out)


def scale_box(box, src_hw, side: int) -> tuple[int, int, int, int]:
    """Map a half-open pixel box into the side x side resized frame."""
    x0, y0, x1, y1 = box
    h, w = src_hw
    sx, sy = side / w, side / h
    return (
        max(0, math.floor(x0 * sx)),
        max(0, math.floor(y0 * sy)),
        min(side, math.ceil(x1 * sx)),
        min(side, math.ceil(y1 * sy)),
    )


def loc_arrays(rows, side: int):
    """Images plus boxes/labels in the resized frame."""
    images, boxes, labels = [], [], []
    for r in rows:
        raw = decode_image(r.path)
        images.append(resize_bilinear(raw, side, side)[None])
        boxes.append(scale_box(r.box, raw.shape, side))
        labels.append(r.label)
    return np.stack(images), boxes, labels


def normalize_batch(images: np.ndarray, mean: float, std: float) -> np.ndarray:
    return normalize(np.asarray(images, np.float32), mean, std)


def make_augment(out_size: int, scale_min: float, mean: float, std: float):
    """Per-sample train transform: crop, coin-flip mirror, normalize.

    Draw order is fixed (crop first, then the flip coin) so streams stay
    aligned across runs. Input/output are [1, H, W].
    """

    def fn(gen: np.random.Generator, img: np.ndarray) -> np.ndarray:
        crop = random_resized_crop(img[0], gen, out_size, scale_min)
        if flip_coin(gen):
            crop = hflip(crop)
        return normalize(crop, mean, std)[None]

    return fn
