"""Synthetic grayscale corpora for desk-scale runs and tests.

Every image is a noisy background: a base level plus a linear illumination
ramp. Planted finding images additionally carry one bright compact shape
(discs and axis-aligned squares of comparable area, alternating). The
classification corpus is finding-present vs finding-absent, so the
discriminative evidence is spatially local and heatmaps have a ground
truth region to hit. Segmentation and localization corpora plant a shape
in every image; their masks and boxes come from the same rasterization
that painted the shape, which makes the ground truth exact by
construction.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imaging import encode_gray_png, encode_mask_png
from .manifest import write_csv
from .rng import RngStream, _splitmix64

TASKS = ("cls", "seg", "loc")


def _rasterize(kind: int, size: int, cy: int, cx: int, extent: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= extent * extent
    return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= extent  # square


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def render_clean(stream: RngStream, size: int, noise: float) -> np.ndarray:
    """Background-only image, no finding; fully determined by the stream."""
    gen = stream.generator()
    base = gen.uniform(0.2, 0.45)
    gy = gen.uniform(-0.1, 0.1)
    gx = gen.uniform(-0.1, 0.1)
    ramp = np.linspace(-0.5, 0.5, size)
    img = base + gy * ramp[:, None] + gx * ramp[None, :]
    img = img + gen.normal(0.0, noise, size=(size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_sample(stream: RngStream, size: int, kind: int, noise: float):
    """One (image, mask, box) triple; fully determined by the stream."""
    gen = stream.generator()
    base = gen.uniform(0.2, 0.45)
    gy = gen.uniform(-0.1, 0.1)
    gx = gen.uniform(-0.1, 0.1)
    contrast = gen.uniform(0.22, 0.45)
    if kind == 0:
        extent = gen.uniform(0.11, 0.18) * size
    else:
        extent = gen.uniform(0.10, 0.16) * size
    margin = int(math.ceil(extent)) + 2
    if 2 * margin >= size:
        raise ConfigError(f"synth size {size} too small for the shape extents")
    cy = int(gen.integers(margin, size - margin))
    cx = int(gen.integers(margin, size - margin))

    ramp = np.linspace(-0.5, 0.5, size)
    img = base + gy * ramp[:, None] + gx * ramp[None, :]
    img = img + gen.normal(0.0, noise, size=(size, size))
    mask = _rasterize(kind, size, cy, cx, extent)
    img = np.where(mask, img + contrast, img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask, _tight_box(mask)


def _split_name(index: int, count: int, fractions: tuple[float, float, float]) -> str:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_corpus(
    out_dir,
    task: str,
    count: int,
    size: int = 64,
    seed: int = 0,
    noise: float = 0.08,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> Path:
    """Write images plus manifest(s) under out_dir; returns the manifest path.

    'cls' alternates finding-absent (label_0) and finding-present (label_1)
    images. 'seg' and 'loc' plant a shape in every image. For 'loc' a
    companion manifest_cls.csv is written as well, listing the planted
    images as present plus an equal number of extra clean images as absent,
    so a presence classifier can be fine-tuned for heatmap evaluation; the
    loc manifest's label column is the classifier class the image
    evidences, which is 1 for every planted row.
    """
    if task not in TASKS:
        raise ConfigError(f"synth task must be one of {TASKS}, got {task!r}")
    if count < 1:
        raise ConfigError(f"synth count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if task == "seg":
        (out_dir / "masks").mkdir(exist_ok=True)

    root = RngStream(_splitmix64(seed)).child("synth", task, size)
    rows = []
    cls_rows = []
    for i in range(count):
        split = _split_name(i, count, fractions)
        if task == "cls":
            present = i % 2  # alternate absent/present, deterministic
            if present:
                img = render_sample(root.child(i), size, (i // 2) % 2, noise)[0]
            else:
                img = render_clean(root.child(i), size, noise)
            name = f"images/img_{i:05d}.png"
            encode_gray_png(out_dir / name, img)
            rows.append([name, split, 1 - present, present])
            continue
        kind = i % 2  # alternate shapes, deterministic
        img, mask, box = render_sample(root.child(i), size, kind, noise)
        name = f"images/img_{i:05d}.png"
        encode_gray_png(out_dir / name, img)
        if task == "seg":
            mask_name = f"masks/mask_{i:05d}.png"
            encode_mask_png(out_dir / mask_name, mask)
            rows.append([name, split, mask_name])
        else:
            rows.append([name, split, 1, *box])
            cls_rows.append([name, split, 0, 1])
    if task == "loc":
        for i in range(count):
            img = render_clean(root.child("clean", i), size, noise)
            name = f"images/clean_{i:05d}.png"
            encode_gray_png(out_dir / name, img)
            cls_rows.append([name, _split_name(i, count, fractions), 1, 0])

    manifest = out_dir / "manifest.csv"
    if task == "cls":
        write_csv(manifest, ["path", "split", "label_0", "label_1"], rows)
    elif task == "seg":
        write_csv(manifest, ["path", "split", "mask_path"], rows)
    else:
        write_csv(
            manifest,
            ["path", "split", "label", "box_x0", "box_y0", "box_x1", "box_y1"],
            rows,
        )
        write_csv(out_dir / "manifest_cls.csv", ["path", "split", "label_0", "label_1"], cls_rows)
    return manifest
