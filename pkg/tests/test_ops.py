"""Forward oracles and contract checks for the primitive kernels."""

import numpy as np
import pytest

from xraymim import ops
from xraymim.errors import NumericalError, ShapeError
from xraymim.ops import primitive_backward, primitive_forward
from xraymim.tensor import Tensor


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestForwardOracles:
    def test_add_mul_against_numpy(self):
        rng = np.random.default_rng(0)
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        np.testing.assert_array_equal(primitive_forward("add", [a, b]).array, a + b)
        np.testing.assert_array_equal(primitive_forward("mul", [a, b]).array, a * b)

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        np.testing.assert_allclose(
            primitive_forward("matmul", [a, b]).array, a @ b, rtol=1e-6
        )

    def test_linear_matches_affine(self):
        rng = np.random.default_rng(2)
        x, w, b = _rand(rng, 5, 3), _rand(rng, 3, 7), _rand(rng, 7)
        np.testing.assert_allclose(
            primitive_forward("linear", [x, w, b]).array, x @ w + b, rtol=1e-6
        )

    def test_layer_norm_zero_mean_unit_var(self):
        rng = np.random.default_rng(3)
        x = _rand(rng, 4, 16)
        out = primitive_forward(
            "layer_norm", [x, np.ones(16, np.float32), np.zeros(16, np.float32)]
        ).array
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-3)

    def test_layer_norm_constant_row_maps_to_bias(self):
        x = np.full((2, 8), 3.25, np.float32)
        gain = np.ones(8, np.float32)
        bias = np.full(8, 0.5, np.float32)
        out = primitive_forward("layer_norm", [x, gain, bias]).array
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_softmax_rows_are_distributions(self):
        rng = np.random.default_rng(4)
        x = _rand(rng, 6, 9) * 10
        y = primitive_forward("softmax", [x]).array
        np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-5)
        assert (y >= 0).all()

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, 3, 5)
        y1 = primitive_forward("softmax", [x]).array
        y2 = primitive_forward("softmax", [x + 100.0]).array
        np.testing.assert_allclose(y1, y2, atol=1e-6)

    def test_activations_pointwise_values(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0], np.float32)
        sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
        np.testing.assert_allclose(
            primitive_forward("silu", [x]).array, x * sig, rtol=1e-5
        )
        np.testing.assert_array_equal(
            primitive_forward("relu", [x]).array, np.maximum(x, 0)
        )
        # gelu fixed points: gelu(0) = 0, and gelu is ~x for large positive x
        g = primitive_forward("gelu", [x]).array
        assert g[2] == 0.0
        np.testing.assert_allclose(g[4], 2.0 * 0.97725, rtol=1e-3)

    def test_mean_matches_numpy(self):
        rng = np.random.default_rng(6)
        x = _rand(rng, 3, 5, 2)
        np.testing.assert_allclose(
            primitive_forward("mean", [x], {"axis": 1}).array, x.mean(1), rtol=1e-6
        )

    def test_conv2d_against_direct_loops(self):
        rng = np.random.default_rng(7)
        x, w, b = _rand(rng, 2, 3, 6, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
        got = primitive_forward("conv2d", [x, w, b], {"stride": 2, "padding": 1}).array
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(got)
        for bb in range(2):
            for o in range(4):
                for i in range(got.shape[2]):
                    for j in range(got.shape[3]):
                        patch = xp[bb, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        ref[bb, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-5)

    def test_conv_transpose2d_against_direct_loops(self):
        rng = np.random.default_rng(8)
        x, w, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 3, 5, 2, 2), _rand(rng, 5)
        got = primitive_forward("conv_transpose2d", [x, w, b], {"stride": 2}).array
        assert got.shape == (2, 5, 8, 8)
        ref = np.zeros_like(got)
        for bb in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(4):
                        ref[bb, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += (
                            x[bb, c, i, j] * w[c]
                        )
        ref += b[None, :, None, None]
        np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-5)

    def test_max_pool_2x2(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = primitive_forward("max_pool2d", [x], {"kernel": 2, "stride": 2}).array
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_bilinear_resize_identity_and_midpoints(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]], np.float32)
        same = primitive_forward("bilinear_resize_2d", [x], {"out_h": 2, "out_w": 2}).array
        np.testing.assert_array_equal(same, x)
        up = primitive_forward("bilinear_resize_2d", [x], {"out_h": 3, "out_w": 3}).array
        # align-corners: corners preserved, center is the mean of all four
        np.testing.assert_allclose(up[0, 0], 0.0)
        np.testing.assert_allclose(up[2, 2], 3.0)
        np.testing.assert_allclose(up[1, 1], 1.5)

    def test_bilinear_resize_degenerate_output(self):
        x = np.array([[1.0, 5.0, 9.0]], np.float32)
        out = primitive_forward("bilinear_resize_2d", [x], {"out_h": 1, "out_w": 1}).array
        # extent-1 output samples coordinate 0
        np.testing.assert_allclose(out, [[1.0]])

    def test_structural_ops(self):
        rng = np.random.default_rng(9)
        x = _rand(rng, 2, 3, 4)
        np.testing.assert_array_equal(
            primitive_forward("reshape", [x], {"shape": (6, 4)}).array, x.reshape(6, 4)
        )
        np.testing.assert_array_equal(
            primitive_forward("transpose", [x], {"axes": (2, 0, 1)}).array,
            x.transpose(2, 0, 1),
        )
        y = _rand(rng, 2, 2, 4)
        np.testing.assert_array_equal(
            primitive_forward("concat", [x, y], {"axis": 1}).array,
            np.concatenate([x, y], 1),
        )
        np.testing.assert_array_equal(
            primitive_forward(
                "slice", [x], {"bounds": ((0, 2), (1, 3), None)}
            ).array,
            x[:, 1:3, :],
        )

    def test_dropout_deterministic_and_scaled(self):
        rng = np.random.default_rng(10)
        x = np.abs(_rand(rng, 1000)) + 1.0
        attrs = {"p": 0.4, "key": 1234}
        y1 = primitive_forward("dropout", [x], attrs).array
        y2 = primitive_forward("dropout", [x], attrs).array
        np.testing.assert_array_equal(y1, y2)
        kept = y1 != 0
        assert 0.5 < kept.mean() < 0.7  # keep rate ~0.6
        np.testing.assert_allclose(y1[kept], x[kept] / 0.6, rtol=1e-6)
        y3 = primitive_forward("dropout", [x], {"p": 0.4, "key": 999}).array
        assert (y1 != y3).any()

    def test_dropout_zero_rate_is_identity(self):
        x = np.ones(7, np.float32)
        np.testing.assert_array_equal(
            primitive_forward("dropout", [x], {"p": 0.0, "key": 5}).array, x
        )


class TestErrorContracts:
    def test_nan_input_raises_with_op_name(self):
        bad = np.array([1.0, np.nan], np.float32)
        with pytest.raises(NumericalError, match="relu"):
            primitive_forward("relu", [bad])

    def test_inf_from_overflow_raises(self):
        big = np.array([1e38, 1e38], np.float32)
        with np.errstate(over="ignore"):
            with pytest.raises(NumericalError, match="mul"):
                primitive_forward("mul", [big, big])

    def test_shape_mismatch_raises(self):
        a = np.ones((2, 3), np.float32)
        b = np.ones((4, 5), np.float32)
        with pytest.raises(ShapeError):
            primitive_forward("matmul", [a, b])

    def test_unknown_op_raises(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            primitive_forward("fused_mystery", [np.ones(2, np.float32)])

    def test_backward_shapes_match_inputs(self):
        rng = np.random.default_rng(11)
        x, w, b = _rand(rng, 5, 3), _rand(rng, 3, 7), _rand(rng, 7)
        g = _rand(rng, 5, 7)
        grads = primitive_backward("linear", [x, w, b], g)
        assert [t.shape for t in grads] == [(5, 3), (3, 7), (7,)]

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            Tensor(np.array([np.inf], np.float32))

    def test_tensor_flat_data_row_major(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        np.testing.assert_array_equal(t.data, np.arange(6, dtype=np.float32))

    def test_max_pool_odd_extent_rejected(self):
        x = np.ones((1, 1, 5, 4), np.float32)
        with pytest.raises(ShapeError):
            primitive_forward("max_pool2d", [x], {"kernel": 2, "stride": 2})


class TestBackwardLinearity:
    """Spot-checks of backward passes against hand-derived expressions.

    (The exhaustive finite-difference sweep lives in test_gradcheck.py.)
    """

    def test_add_backward_unbroadcasts(self):
        a = np.zeros((2, 3), np.float32)
        b = np.zeros((3,), np.float32)
        g = np.ones((2, 3), np.float32)
        ga, gb = primitive_backward("add", [a, b], g)
        np.testing.assert_array_equal(ga.array, np.ones((2, 3)))
        np.testing.assert_array_equal(gb.array, np.full(3, 2.0))

    def test_resize_backward_is_transpose(self):
        rng = np.random.default_rng(12)
        x = _rand(rng, 4, 6)
        g = _rand(rng, 9, 11)
        attrs = {"out_h": 9, "out_w": 11}
        (gx,) = primitive_backward("bilinear_resize_2d", [x], g, attrs)
        ar = ops.resize_matrix(4, 9, np.float32)
        ac = ops.resize_matrix(6, 11, np.float32)
        np.testing.assert_allclose(gx.array, ar.T @ g @ ac, rtol=1e-5)

    def test_max_pool_backward_routes_to_argmax(self):
        x = np.array([[[[1.0, 2.0], [4.0, 3.0]]]], np.float32)
        g = np.array([[[[7.0]]]], np.float32)
        (gx,) = primitive_backward("max_pool2d", [x], g, {"kernel": 2, "stride": 2})
        np.testing.assert_array_equal(gx.array[0, 0], [[0, 0], [7, 0]])
