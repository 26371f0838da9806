"""AdamW with decoupled weight decay, parameter groups, and the lr schedule.

All moment arithmetic is float32 numpy, so a given (gradients, state)
sequence updates parameters bitwise identically on every rerun.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Param
from .errors import ConfigError, NumericalError


@dataclass
class ParamGroup:
    """Parameters sharing an lr scale and a weight-decay switch.

    Decay is applied only where weight_decay_enabled is set; norm gains,
    biases and token/positional embeddings conventionally run without it.
    """

    name: str
    params: list[Param]
    lr_scale: float = 1.0
    weight_decay_enabled: bool = True


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    groups: list[ParamGroup],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place update. lr is the base rate times any schedule multiplier;
    each group contributes its own lr_scale on top."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = np.float32(1.0 - b1**t)
    bc2 = np.float32(1.0 - b2**t)
    b1f, b2f = np.float32(b1), np.float32(b2)
    epsf = np.float32(eps)
    for group in groups:
        eff_lr = np.float32(lr * group.lr_scale)
        for p in group.params:
            if p.name not in grads:
                raise KeyError(f"no gradient supplied for parameter '{p.name}'")
            g = grads[p.name]
            if g.shape != p.value.shape:
                raise NumericalError(
                    f"gradient shape {g.shape} mismatches parameter '{p.name}' {p.value.shape}"
                )
            g = g.astype(np.float32, copy=False)
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = np.zeros_like(p.value)
            v = state.v.get(p.name)
            if v is None:
                v = state.v[p.name] = np.zeros_like(p.value)
            m *= b1f
            m += (np.float32(1.0) - b1f) * g
            v *= b2f
            v += (np.float32(1.0) - b2f) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + epsf)
            if weight_decay and group.weight_decay_enabled:
                update = update + np.float32(weight_decay) * p.value
            p.value -= eff_lr * update
            if not np.all(np.isfinite(p.value)):
                raise NumericalError(f"parameter '{p.name}' became non-finite")


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Half-cosine decay from base_lr (step 0) to min_lr (step total_steps)."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if base_lr < min_lr:
        raise ConfigError(f"base_lr {base_lr} below min_lr {min_lr}")
    w = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    # convex combination (not offset form) so the endpoints and the midpoint
    # evaluate exactly to base_lr, min_lr and their mean
    return base_lr * w + min_lr * (1.0 - w)


def schedule_for_step(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """lr used while performing 0-based step `step` of `total_steps` total.

    The schedule is evaluated on [0, total_steps - 1] so the first step runs
    at base_lr and the last recorded step runs exactly at min_lr.
    """
    horizon = max(total_steps - 1, 1)
    return cosine_lr(min(step, horizon), horizon, base_lr, min_lr)
