"""Binary checkpoint format.

Layout, all integers little-endian:

    bytes 0..3    magic "EVAX"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 metadata byte length
    then          UTF-8 JSON metadata
    then          zero padding to the next 8-byte boundary
    then          payload: concatenated raw float32 tensor bytes

The JSON metadata holds a "tensors" table mapping name -> dtype/shape/
offset/length (offsets relative to the payload start, each 8-byte aligned)
plus a free-form "meta" object (model config, step counter, seed). Writing
is deterministic for identical inputs, so save/load/save round-trips are
bitwise identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatVersionError,
    IntegrityError,
    TruncatedFileError,
)
from .tensor import Tensor

MAGIC = b"EVAX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _align8(n: int) -> int:
    return (n + 7) & ~7


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors (float32, finite) and JSON-able metadata to path."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    # canonical name order, so identical tensor sets serialize identically
    # regardless of dict construction order
    for name, value in sorted(tensors.items()):
        t = value if isinstance(value, Tensor) else Tensor(value)
        raw = t.tobytes()
        entries[name] = {
            "dtype": "f32",
            "shape": list(t.shape),
            "offset": offset,
            "length": len(raw),
        }
        blobs.append(raw)
        pad = _align8(len(raw)) - len(raw)
        if pad:
            blobs.append(b"\x00" * pad)
        offset = _align8(offset + len(raw))
    meta_json = json.dumps(
        {"tensors": entries, "meta": meta or {}}, separators=(",", ":"), sort_keys=True
    ).encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_json))
    head_pad = _align8(_HEADER.size + len(meta_json)) - (_HEADER.size + len(meta_json))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta_json)
        fh.write(b"\x00" * head_pad)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (tensors, meta). Raises the specific
    subclass of CheckpointError for each way the file can be unusable."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported format version {version}")
    meta_end = _HEADER.size + meta_len
    if meta_end > len(raw):
        raise TruncatedFileError(f"{path}: declared metadata extends past end of file")
    try:
        doc = json.loads(raw[_HEADER.size : meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: metadata is not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "tensors" not in doc or "meta" not in doc:
        raise IntegrityError(f"{path}: metadata missing tensors/meta tables")

    payload_start = _align8(meta_end)
    payload = raw[payload_start:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in doc["tensors"].items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"{path}: malformed tensor entry '{name}'") from exc
        if dtype != "f32":
            raise IntegrityError(f"{path}: tensor '{name}' has unsupported dtype {dtype!r}")
        if any(s < 0 for s in shape) or offset < 0 or offset % 8:
            raise IntegrityError(f"{path}: tensor '{name}' has invalid shape or offset")
        n = int(np.prod(shape)) if shape else 1
        if length != 4 * n:
            raise IntegrityError(
                f"{path}: tensor '{name}' length {length} inconsistent with shape {shape}"
            )
        if offset + length > len(payload):
            raise TruncatedFileError(f"{path}: payload ends before tensor '{name}' does")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        arr = arr.astype(np.float32)  # own, writable copy in native order
        if not np.all(np.isfinite(arr)):
            raise IntegrityError(f"{path}: tensor '{name}' contains non-finite values")
        tensors[name] = arr
    return tensors, doc["meta"]
