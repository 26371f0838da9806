"""Deterministic randomness built on a counter-based generator.

All stochastic behavior in the package draws from numpy's Philox bit
generator, a 64-bit counter-based PRNG. A single run seed is expanded into
independent named streams ("init", "mask", "augment"), and each stream can
derive child streams from integer or string coordinates (epoch, sample
index, parameter name, ...). Derivation is pure key arithmetic, so the
values a consumer draws depend only on (seed, stream name, coordinates)
and never on program order. That is what makes reruns bitwise identical.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

STREAM_INIT = "init"
STREAM_MASK = "mask"
STREAM_AUGMENT = "augment"


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _fold(key: int, part: int | str) -> int:
    if isinstance(part, str):
        part = _fnv1a64(part)
    elif isinstance(part, (bool, np.integer)):
        part = int(part)
    elif not isinstance(part, int):
        raise TypeError(f"stream coordinates must be int or str, got {type(part)!r}")
    if part < 0:
        part &= _MASK64
    return _splitmix64(key ^ _splitmix64(part))


class RngStream:
    """An immutable 64-bit key plus derivation and drawing helpers."""

    __slots__ = ("key",)

    def __init__(self, key: int):
        self.key = key & _MASK64

    def child(self, *parts: int | str) -> "RngStream":
        """Derive an independent stream from coordinate parts."""
        key = self.key
        for part in parts:
            key = _fold(key, part)
        return RngStream(key)

    def generator(self) -> np.random.Generator:
        """Fresh generator; every call restarts the stream's sequence."""
        return np.random.Generator(np.random.Philox(key=self.key))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(key=0x{self.key:016x})"


def stream_root(seed: int, name: str) -> RngStream:
    """Top-level stream for one of the named purposes under a run seed."""
    return RngStream(_fold(_splitmix64(int(seed) & _MASK64), name))


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    """Permutation of range(n) fully determined by the integer seed."""
    if n < 0:
        raise ValueError("permutation length must be non-negative")
    return RngStream(_splitmix64(int(seed) & _MASK64)).permutation(n)
