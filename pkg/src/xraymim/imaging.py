"""Grayscale image IO and the augmentation/normalization pipeline.

Decoded images are float32 [H, W] in [0, 1] (8-bit value v maps to v/255).
Only 8-bit single-channel PNG and PGM are accepted; anything else fails
loudly rather than being silently converted, since silent channel or
bit-depth coercion changes pixel statistics under the model.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, ImageDecodeError
from .ops import resize_matrix

_SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM under the PPM reader
_16BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}


def decode_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM into float32 [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            fmt = img.format
            mode = img.mode
            if fmt not in _SUPPORTED_FORMATS:
                raise ImageDecodeError(f"{path}: unsupported format {fmt!r} (need PNG or PGM)")
            if mode in _16BIT_MODES:
                raise ImageDecodeError(f"{path}: unsupported bit depth (16-bit), need 8-bit")
            if mode != "L":
                raise ImageDecodeError(
                    f"{path}: unsupported channels (mode {mode!r}), need single-channel 8-bit"
                )
            arr = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ImageDecodeError(f"{path}: file not found") from exc
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"{path}: not a decodable image") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def encode_gray_png(path, img: np.ndarray) -> None:
    """Write float32 [0, 1] (or uint8) as an 8-bit grayscale PNG."""
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")


def encode_rgb_png(path, img: np.ndarray) -> None:
    """Write float32 [H, W, 3] in [0, 1] (or uint8) as an RGB PNG."""
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def encode_mask_png(path, mask: np.ndarray) -> None:
    """Write a boolean/0-1 mask as a 0/255 grayscale PNG."""
    Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a single [H, W] image.

    Interpolation weights are convex, so mathematically the output range is
    within the input range; the result is clipped to that range to keep the
    guarantee under float rounding.
    """
    if img.ndim != 2:
        raise DataError(f"resize_bilinear expects [H, W], got shape {img.shape}")
    if (out_h, out_w) == img.shape:
        return img.astype(np.float32, copy=True)
    ar = resize_matrix(img.shape[0], out_h)
    ac = resize_matrix(img.shape[1], out_w)
    out = ar @ img.astype(np.float64) @ ac.T
    lo, hi = float(img.min()), float(img.max())
    return np.clip(out, lo, hi).astype(np.float32)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with the same align-corners geometry.

    Used for label masks: values are copied, never blended.
    """
    if img.ndim != 2:
        raise DataError(f"resize_nearest expects [H, W], got shape {img.shape}")
    h, w = img.shape

    def indices(n_in, n_out):
        if n_out == 1:
            return np.zeros(1, np.int64)
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        return np.clip(np.rint(src).astype(np.int64), 0, n_in - 1)

    return img[np.ix_(indices(h, out_h), indices(w, out_w))].copy()


def flip_coin(gen: np.random.Generator, p: float = 0.5) -> bool:
    return bool(gen.random() < p)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def random_resized_crop(
    img: np.ndarray,
    gen: np.random.Generator,
    out_size: int,
    scale_min: float,
    scale_max: float = 1.0,
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
    max_tries: int = 10,
) -> np.ndarray:
    """Crop a random area/aspect window and resize it to out_size square.

    Per attempt: area fraction ~ U[scale_min, scale_max], aspect ~ U[ratio].
    After max_tries rejected proposals the fallback is the largest centered
    square. Consumes draws only from the supplied generator.
    """
    h, w = img.shape
    for _ in range(max_tries):
        frac = gen.uniform(scale_min, scale_max)
        aspect = gen.uniform(ratio[0], ratio[1])
        area = frac * h * w
        cw = int(round(math.sqrt(area * aspect)))
        ch = int(round(math.sqrt(area / aspect)))
        if 1 <= cw <= w and 1 <= ch <= h:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            crop = img[top : top + ch, left : left + cw]
            return resize_bilinear(crop, out_size, out_size)
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return resize_bilinear(img[top : top + side, left : left + side], out_size, out_size)


def normalize(img: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise DataError(f"normalization std must be positive, got {std}")
    return ((img - np.float32(mean)) / np.float32(std)).astype(np.float32)


def corpus_stats(images) -> tuple[float, float]:
    """Pixel mean and population std over an iterable of [H, W] arrays.

    Single streaming pass (count, sum, sum of squares) in float64; the std
    is floored at 1e-6 so constant corpora still normalize.
    """
    n = 0
    total = 0.0
    total_sq = 0.0
    for img in images:
        arr = np.asarray(img, dtype=np.float64)
        n += arr.size
        total += float(arr.sum())
        total_sq += float((arr * arr).sum())
    if n == 0:
        raise DataError("corpus_stats needs at least one image")
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return float(mean), float(max(math.sqrt(var), 1e-6))
