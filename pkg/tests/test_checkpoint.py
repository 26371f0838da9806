"""Round-trip and corruption contracts for the checkpoint format."""

import json
import struct

import numpy as np
import pytest

from xraymim.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from xraymim.errors import (
    BadMagicError,
    FormatVersionError,
    IntegrityError,
    TruncatedFileError,
)


@pytest.fixture
def sample(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "weights.a": rng.standard_normal((3, 5)).astype(np.float32),
        "weights.b": rng.standard_normal(7).astype(np.float32),
        "scalarish": np.array([2.5], np.float32),
    }
    meta = {"step": 120, "seed": 42, "model": {"dim": 64, "depth": 2}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta)
    return path, tensors, meta


class TestRoundTrip:
    def test_values_and_meta_survive(self, sample):
        path, tensors, meta = sample
        loaded, meta2 = load_checkpoint(path)
        assert meta2 == meta
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_save_load_save_bitwise_identical(self, sample, tmp_path):
        path, _, _ = sample
        loaded, meta = load_checkpoint(path)
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(path2, loaded, meta)
        assert path.read_bytes() == path2.read_bytes()

    def test_header_layout(self, sample):
        path, _, _ = sample
        raw = path.read_bytes()
        magic, version, meta_len = struct.unpack_from("<4sIQ", raw, 0)
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        doc = json.loads(raw[16 : 16 + meta_len])
        for entry in doc["tensors"].values():
            assert entry["offset"] % 8 == 0
            assert entry["dtype"] == "f32"

    def test_loaded_arrays_are_writable(self, sample):
        path, _, _ = sample
        loaded, _ = load_checkpoint(path)
        loaded["weights.a"][0, 0] = 9.0  # must not raise


class TestCorruption:
    def test_bad_magic(self, sample):
        path, _, _ = sample
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_unsupported_version(self, sample):
        path, _, _ = sample
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatVersionError):
            load_checkpoint(path)

    def test_truncated_payload(self, sample):
        path, _, _ = sample
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_truncated_header(self, sample):
        path, _, _ = sample
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_shape_offset_mismatch(self, sample):
        path, _, _ = sample
        raw = path.read_bytes()
        meta_len = struct.unpack_from("<Q", raw, 8)[0]
        doc = json.loads(raw[16 : 16 + meta_len])
        doc["tensors"]["weights.a"]["shape"] = [3, 6]  # length no longer matches
        blob = json.dumps(doc, separators=(",", ":"), sort_keys=True).encode()
        # keep offsets stable by padding the JSON with spaces
        blob += b" " * (meta_len - len(blob))
        path.write_bytes(raw[:16] + blob + raw[16 + meta_len :])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_garbage_metadata(self, sample):
        path, _, _ = sample
        raw = bytearray(path.read_bytes())
        raw[20:24] = b"\xff\xfe\xfd\xfc"
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_non_finite_payload_rejected(self, sample):
        path, _, _ = sample
        raw = bytearray(path.read_bytes())
        meta_len = struct.unpack_from("<Q", raw, 8)[0]
        doc = json.loads(raw[16 : 16 + meta_len])
        payload_start = (16 + meta_len + 7) & ~7
        entry = doc["tensors"]["weights.a"]
        pos = payload_start + entry["offset"]  # first float of a real tensor
        raw[pos : pos + 4] = struct.pack("<f", float("nan"))
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_checkpoint(path)
