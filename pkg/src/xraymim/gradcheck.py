"""Finite-difference verification of analytic gradients.

The analytic side runs the graph exactly as training does (typically in
float32). The numeric side re-evaluates the same kernel code on float64
copies, so the reference derivative is not drowned in float32 forward
rounding; central differences with eps around 1e-3 then resolve gradients
to far better than the tolerances used in the tests.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Var, backward, no_grad
from .errors import ConfigError
from .rng import RngStream


def grad_check(
    function: Callable[[list[Var]], Var],
    point: Sequence[np.ndarray],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    function must map a list of Vars to a scalar Var using package ops.
    point supplies one array per input. relative error per coordinate is
    |analytic - numeric| / max(1e-6, |numeric|); the max over all checked
    coordinates is returned. max_coords, when set, bounds the number of
    coordinates checked per input (chosen by a seeded draw) so large
    compositions stay cheap.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ConfigError(f"grad_check eps must be in [1e-4, 1e-2], got {eps}")

    inputs = [Var(np.asarray(p), requires_grad=True) for p in point]
    loss = function(inputs)
    if loss.value.size != 1:
        raise ConfigError("grad_check function must return a scalar")
    backward(loss)
    analytic = [
        np.zeros_like(v.value) if v.grad is None else v.grad for v in inputs
    ]

    points64 = [np.asarray(p, dtype=np.float64) for p in point]

    def eval64(arrays: list[np.ndarray]) -> float:
        with no_grad():
            out = function([Var(a) for a in arrays])
        return float(out.value.reshape(()))

    worst = 0.0
    for i, base in enumerate(points64):
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picker = RngStream(seed).child("grad_check", i)
            coords = picker.generator().choice(flat.size, size=max_coords, replace=False)
        ga_flat = analytic[i].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = eval64(points64)
            flat[c] = orig - eps
            f_minus = eval64(points64)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(ga_flat[c]) - numeric) / max(1e-6, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
