"""CSV manifests describing corpora for the three task types.

Headers (exact, ordered):
    cls:  path,split,label_0,...,label_{K-1}
    seg:  path,split,mask_path
    loc:  path,split,label,box_x0,box_y0,box_x1,box_y1

split is train/val/test. File paths are resolved relative to the manifest's
directory so corpora stay relocatable; referenced files must exist at load
time. Boxes are half-open pixel bounds [x0, x1) x [y0, y1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .rng import seeded_permutation

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ClsRow:
    path: Path
    split: str
    labels: tuple[int, ...]  # 0/1/-1 per class; -1 policy applied downstream


@dataclass(frozen=True)
class SegRow:
    path: Path
    split: str
    mask_path: Path


@dataclass(frozen=True)
class LocRow:
    path: Path
    split: str
    label: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 half-open


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = [row for row in reader if row]
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc})") from exc
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    return rows[0], rows[1:]


def _check_split(path: Path, lineno: int, split: str) -> None:
    if split not in SPLITS:
        raise ManifestError(f"{path}:{lineno}: split {split!r} not one of {SPLITS}")


def _resolve(base: Path, rel: str, manifest: Path, lineno: int) -> Path:
    p = Path(rel)
    if not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ManifestError(f"{manifest}:{lineno}: referenced file missing: {p}")
    return p


def load_cls_manifest(path) -> tuple[list[ClsRow], int]:
    """Returns (rows, num_classes)."""
    path = Path(path)
    header, body = _read_rows(path)
    k = len(header) - 2
    expected = ["path", "split"] + [f"label_{i}" for i in range(k)]
    if k < 1 or header != expected:
        raise ManifestError(f"{path}: bad classification header {header}")
    base = path.parent
    rows = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        _check_split(path, lineno, row[1])
        labels = []
        for i, field in enumerate(row[2:]):
            try:
                val = int(field)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: label_{i} {field!r} not an integer") from exc
            if val not in (-1, 0, 1):
                raise ManifestError(f"{path}:{lineno}: label_{i} must be -1/0/1, got {val}")
            labels.append(val)
        rows.append(ClsRow(_resolve(base, row[0], path, lineno), row[1], tuple(labels)))
    return rows, k


def load_seg_manifest(path) -> list[SegRow]:
    path = Path(path)
    header, body = _read_rows(path)
    if header != ["path", "split", "mask_path"]:
        raise ManifestError(f"{path}: bad segmentation header {header}")
    base = path.parent
    rows = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        _check_split(path, lineno, row[1])
        rows.append(
            SegRow(
                _resolve(base, row[0], path, lineno),
                row[1],
                _resolve(base, row[2], path, lineno),
            )
        )
    return rows


def load_loc_manifest(path) -> list[LocRow]:
    path = Path(path)
    header, body = _read_rows(path)
    if header != ["path", "split", "label", "box_x0", "box_y0", "box_x1", "box_y1"]:
        raise ManifestError(f"{path}: bad localization header {header}")
    base = path.parent
    rows = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != 7:
            raise ManifestError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
        _check_split(path, lineno, row[1])
        try:
            label = int(row[2])
            box = tuple(int(v) for v in row[3:7])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-integer label or box field") from exc
        x0, y0, x1, y1 = box
        if label < 0 or x0 < 0 or y0 < 0 or x0 >= x1 or y0 >= y1:
            raise ManifestError(f"{path}:{lineno}: degenerate box or negative label")
        rows.append(LocRow(_resolve(base, row[0], path, lineno), row[1], label, box))
    return rows


def subsample_train(rows: list, fraction: float, seed: int) -> list:
    """Keep a seeded prefix-of-permutation subset of the train rows.

    The selected set for a smaller fraction is always contained in the set
    for a larger one at the same seed (both are prefixes of one fixed
    permutation). Row order is preserved; val/test rows pass through.
    """
    if not 0.0 < fraction <= 1.0:
        raise ManifestError(f"data fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(rows)
    train_idx = [i for i, r in enumerate(rows) if r.split == "train"]
    n = len(train_idx)
    # epsilon guards float fuzz in fraction*n for exact multiples
    keep_n = max(1, math.ceil(fraction * n - 1e-9))
    order = seeded_permutation(n, seed)
    chosen = {train_idx[j] for j in order[:keep_n]}
    return [r for i, r in enumerate(rows) if r.split != "train" or i in chosen]


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
