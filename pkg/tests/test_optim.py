"""Hand-computed oracles for the optimizer and the lr schedule."""

import math

import numpy as np
import pytest

from xraymim.autodiff import Param
from xraymim.errors import ConfigError
from xraymim.optim import AdamWState, ParamGroup, adamw_step, cosine_lr, schedule_for_step


def _single_param(value):
    p = Param(np.array([value], np.float32), "w")
    return p, [ParamGroup("all", [p])]


class TestAdamW:
    def test_first_step_hand_oracle(self):
        # theta=1, g=2, lr=0.1: bias-corrected m_hat=2, v_hat=4 -> step of ~0.1
        p, groups = _single_param(1.0)
        state = AdamWState()
        adamw_step(groups, {"w": np.array([2.0], np.float32)}, state, lr=0.1)
        np.testing.assert_allclose(p.value, [0.9], atol=1e-6)

    def test_two_steps_match_scalar_reference(self):
        p, groups = _single_param(1.5)
        state = AdamWState()
        gs = [0.3, -1.1]
        b1, b2, eps, lr = 0.9, 0.98, 1e-8, 0.05
        m = v = 0.0
        theta = 1.5
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            adamw_step(groups, {"w": np.array([g], np.float32)}, state, lr=lr)
        np.testing.assert_allclose(p.value, [theta], rtol=1e-5)

    def test_zero_grad_with_decay_shrinks_multiplicatively(self):
        p, groups = _single_param(2.0)
        state = AdamWState()
        adamw_step(
            groups, {"w": np.zeros(1, np.float32)}, state, lr=0.1, weight_decay=0.1
        )
        # moments stay zero, so only the decoupled decay acts: theta * (1 - lr*wd)
        np.testing.assert_allclose(p.value, [2.0 * (1 - 0.1 * 0.1)], rtol=1e-6)

    def test_decay_respects_group_switch(self):
        p = Param(np.array([2.0], np.float32), "w")
        groups = [ParamGroup("nodecay", [p], weight_decay_enabled=False)]
        adamw_step(groups, {"w": np.zeros(1, np.float32)}, AdamWState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.value, [2.0])

    def test_lr_scale_multiplies_effective_rate(self):
        p1, g1 = _single_param(1.0)
        p2 = Param(np.array([1.0], np.float32), "w")
        groups2 = [ParamGroup("scaled", [p2], lr_scale=0.5)]
        grad = {"w": np.array([2.0], np.float32)}
        adamw_step(g1, grad, AdamWState(), lr=0.1)
        adamw_step(groups2, grad, AdamWState(), lr=0.1)
        step1 = 1.0 - p1.value[0]
        step2 = 1.0 - p2.value[0]
        np.testing.assert_allclose(step2, 0.5 * step1, rtol=1e-6)

    def test_bitwise_reproducible(self):
        rng = np.random.default_rng(3)
        grads = [rng.standard_normal(16).astype(np.float32) for _ in range(5)]

        def run():
            p = Param(np.ones(16, np.float32), "w")
            state = AdamWState()
            groups = [ParamGroup("all", [p])]
            for g in grads:
                adamw_step(groups, {"w": g}, state, lr=0.01, weight_decay=0.05)
            return p.value.tobytes()

        assert run() == run()

    def test_missing_grad_raises(self):
        p, groups = _single_param(1.0)
        with pytest.raises(KeyError):
            adamw_step(groups, {}, AdamWState(), lr=0.1)


class TestCosineSchedule:
    def test_endpoints_and_midpoint_exact(self):
        base, lo = 3e-4, 1e-5
        assert cosine_lr(0, 100, base, lo) == base
        assert cosine_lr(100, 100, base, lo) == lo
        assert cosine_lr(50, 100, base, lo) == (base + lo) / 2

    def test_monotone_nonincreasing(self):
        vals = [cosine_lr(s, 200, 1e-3, 0.0) for s in range(201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            cosine_lr(5, 4, 1e-3)
        with pytest.raises(ConfigError):
            cosine_lr(-1, 4, 1e-3)
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1e-3)

    def test_step_schedule_covers_full_range(self):
        base, lo = 1e-3, 1e-6
        total = 50
        lrs = [schedule_for_step(s, total, base, lo) for s in range(total)]
        assert lrs[0] == base
        assert lrs[-1] == lo
        assert schedule_for_step(0, 1, base, lo) == base
