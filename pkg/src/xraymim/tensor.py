"""Tensor value type: float32, C-contiguous, finite.

The compute kernels in ops.py work on raw ndarrays so they can also be run
in float64 by the gradient checker; Tensor is the contract-enforcing
wrapper used at API boundaries (primitive dispatch, checkpoints).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError


class Tensor:
    """Dense float32 array with shape metadata and flat row-major data."""

    __slots__ = ("array",)

    def __init__(self, array, *, check_finite: bool = True):
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if check_finite and not np.all(np.isfinite(arr)):
            raise NumericalError("tensor contains NaN or Inf")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def tobytes(self) -> bytes:
        """Little-endian raw float32 bytes, row-major."""
        return self.array.astype("<f4", copy=False).tobytes()

    @staticmethod
    def frombytes(raw: bytes, shape: tuple[int, ...]) -> "Tensor":
        n = int(np.prod(shape)) if shape else 1
        if len(raw) != 4 * n:
            raise ShapeError(f"byte length {len(raw)} does not match shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return Tensor(arr, check_finite=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"
