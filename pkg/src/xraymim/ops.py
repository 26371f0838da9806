"""Primitive tensor operations: forward kernels and analytic backward passes.

This is the complete differentiable vocabulary of the package; every model
is a composition of these kernels (plus a few fused losses in autodiff.py
that have their own verified gradients). Kernels are dtype-polymorphic so
the gradient checker can run the same code in float64; production code
always feeds float32.

Every forward and backward output is checked for NaN/Inf and failures are
reported with the op name, so divergence surfaces at the op that produced
it rather than as a corrupted loss many steps later.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf, expit

from .errors import NumericalError, ShapeError
from .rng import RngStream
from .tensor import Tensor


def _check_finite(arr: np.ndarray, op_id: str, role: str = "output") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {role} in op '{op_id}'")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra kernels
# ---------------------------------------------------------------------------


def _fwd_add(inputs, attrs):
    a, b = inputs
    return a + b


def _bwd_add(inputs, attrs, out, g):
    a, b = inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fwd_mul(inputs, attrs):
    a, b = inputs
    return a * b


def _bwd_mul(inputs, attrs, out, g):
    a, b = inputs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fwd_matmul(inputs, attrs):
    a, b = inputs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _bwd_matmul(inputs, attrs, out, g):
    a, b = inputs
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _fwd_linear(inputs, attrs):
    x, w, b = inputs
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear weight/bias mismatch: w {w.shape}, b {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input dim {x.shape} vs weight {w.shape}")
    return np.matmul(x, w) + b


def _bwd_linear(inputs, attrs, out, g):
    x, w, b = inputs
    gx = np.matmul(g, w.T)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = np.matmul(x2.T, g2)
    gb = g2.sum(axis=0)
    return [gx, gw, gb]


def _fwd_layer_norm(inputs, attrs):
    x, gain, bias = inputs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    eps = x.dtype.type(attrs.get("eps", 1e-6))
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return xhat * gain + bias


def _bwd_layer_norm(inputs, attrs, out, g):
    x, gain, bias = inputs
    eps = x.dtype.type(attrs.get("eps", 1e-6))
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dxhat = g * gain
    # standard layer-norm backward over the last axis
    gx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    lead = (-1, d)
    ggain = (g * xhat).reshape(lead).sum(axis=0)
    gbias = g.reshape(lead).sum(axis=0)
    return [gx, ggain, gbias]


def _fwd_softmax(inputs, attrs):
    (x,) = inputs
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _bwd_softmax(inputs, attrs, out, g):
    y = out if out is not None else _fwd_softmax(inputs, attrs)
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return [y * (g - dot)]


def _fwd_silu(inputs, attrs):
    (x,) = inputs
    return x * expit(x)


def _bwd_silu(inputs, attrs, out, g):
    (x,) = inputs
    s = expit(x)
    return [g * s * (1.0 + x * (1.0 - s))]


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _fwd_gelu(inputs, attrs):
    (x,) = inputs
    # exact (erf) form, not the tanh approximation
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))


def _bwd_gelu(inputs, attrs, out, g):
    (x,) = inputs
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = x.dtype.type(_INV_SQRT2PI) * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _fwd_relu(inputs, attrs):
    (x,) = inputs
    return np.maximum(x, 0)


def _bwd_relu(inputs, attrs, out, g):
    (x,) = inputs
    return [g * (x > 0)]


def _fwd_mean(inputs, attrs):
    (x,) = inputs
    axis = attrs["axis"]
    return x.mean(axis=axis, keepdims=attrs.get("keepdims", False))


def _bwd_mean(inputs, attrs, out, g):
    (x,) = inputs
    axis = attrs["axis"]
    n = x.shape[axis]
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape) / x.dtype.type(n)]


# ---------------------------------------------------------------------------
# spatial kernels (NCHW layout)
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, kh, kw]


def _fwd_conv2d(inputs, attrs):
    x, w, b = inputs
    stride = attrs.get("stride", 1)
    pad = attrs.get("padding", 0)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias must be ({w.shape[0]},), got {b.shape}")
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape}")
    win = _conv_windows(xp, kh, kw, stride)
    out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    return out + b[None, :, None, None]


def _bwd_conv2d(inputs, attrs, out, g):
    x, w, b = inputs
    stride = attrs.get("stride", 1)
    pad = attrs.get("padding", 0)
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _conv_windows(xp, kh, kw, stride)
    gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    for ki in range(kh):
        for kj in range(kw):
            # [B,Ho,Wo,C] contribution of kernel tap (ki,kj)
            t = np.tensordot(g, w[:, :, ki, kj], axes=([1], [0]))
            gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                t.transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad : xp.shape[2] - pad, pad : xp.shape[3] - pad] if pad else gxp
    return [gx, gw, gb]


def _fwd_conv_transpose2d(inputs, attrs):
    x, w, b = inputs
    stride = attrs.get("stride", 2)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d channel mismatch: x {x.shape} vs w {w.shape}")
    cout = w.shape[1]
    if b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias must be ({cout},), got {b.shape}")
    kh, kw = w.shape[2], w.shape[3]
    bsz, _, hi, wi = x.shape
    out = np.zeros((bsz, cout, (hi - 1) * stride + kh, (wi - 1) * stride + kw), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            t = np.tensordot(x, w[:, :, ki, kj], axes=([1], [0]))  # [B,Hi,Wi,Cout]
            out[:, :, ki : ki + stride * hi : stride, kj : kj + stride * wi : stride] += (
                t.transpose(0, 3, 1, 2)
            )
    return out + b[None, :, None, None]


def _bwd_conv_transpose2d(inputs, attrs, out, g):
    x, w, b = inputs
    stride = attrs.get("stride", 2)
    kh, kw = w.shape[2], w.shape[3]
    hi, wi = x.shape[2], x.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for ki in range(kh):
        for kj in range(kw):
            gs = g[:, :, ki : ki + stride * hi : stride, kj : kj + stride * wi : stride]
            gx += np.tensordot(gs, w[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
            gw[:, :, ki, kj] = np.einsum("bcij,boij->co", x, gs, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    return [gx, gw, gb]


def _pool_windows(x: np.ndarray, k: int):
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d input {h}x{w} not divisible by kernel {k}")
    win = x.reshape(bsz, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(bsz, c, h // k, w // k, k * k)


def _fwd_max_pool2d(inputs, attrs):
    (x,) = inputs
    k = attrs.get("kernel", 2)
    if attrs.get("stride", k) != k:
        raise ShapeError("max_pool2d supports stride == kernel only")
    return _pool_windows(x, k).max(axis=-1)


def _bwd_max_pool2d(inputs, attrs, out, g):
    (x,) = inputs
    k = attrs.get("kernel", 2)
    bsz, c, h, w = x.shape
    win = _pool_windows(x, k)
    idx = win.argmax(axis=-1)  # ties: first max wins, deterministically
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    gx = (
        gwin.reshape(bsz, c, h // k, w // k, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, c, h, w)
    )
    return [gx]


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic interpolation matrix for 1-d align-corners resize.

    Output coordinate i samples source coordinate i*(n_in-1)/(n_out-1);
    a degenerate output extent of 1 samples coordinate 0.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        mat[0, 0] = 1.0
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        i0 = np.floor(src).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        np.add.at(mat, (np.arange(n_out), i0), 1.0 - frac)
        np.add.at(mat, (np.arange(n_out), i1), frac)
    return mat.astype(dtype)


def _fwd_bilinear_resize_2d(inputs, attrs):
    (x,) = inputs
    out_h, out_w = attrs["out_h"], attrs["out_w"]
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize_2d needs >= 2 dims, got {x.shape}")
    ar = resize_matrix(x.shape[-2], out_h, x.dtype)
    ac = resize_matrix(x.shape[-1], out_w, x.dtype)
    return np.matmul(np.matmul(ar, x), ac.T)


def _bwd_bilinear_resize_2d(inputs, attrs, out, g):
    (x,) = inputs
    ar = resize_matrix(x.shape[-2], attrs["out_h"], x.dtype)
    ac = resize_matrix(x.shape[-1], attrs["out_w"], x.dtype)
    return [np.matmul(np.matmul(ar.T, g), ac)]


# ---------------------------------------------------------------------------
# structural kernels
# ---------------------------------------------------------------------------


def _fwd_reshape(inputs, attrs):
    (x,) = inputs
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    return x.reshape(shape)


def _bwd_reshape(inputs, attrs, out, g):
    (x,) = inputs
    return [g.reshape(x.shape)]


def _fwd_transpose(inputs, attrs):
    (x,) = inputs
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    return x.transpose(axes)


def _bwd_transpose(inputs, attrs, out, g):
    axes = tuple(attrs["axes"])
    return [g.transpose(np.argsort(axes))]


def _fwd_concat(inputs, attrs):
    axis = attrs["axis"]
    return np.concatenate(inputs, axis=axis)


def _bwd_concat(inputs, attrs, out, g):
    axis = attrs["axis"]
    sizes = [inp.shape[axis] for inp in inputs]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _norm_bounds(x: np.ndarray, bounds):
    if len(bounds) != x.ndim:
        raise ShapeError(f"slice bounds rank {len(bounds)} vs input ndim {x.ndim}")
    sl = []
    for dim, b in zip(x.shape, bounds):
        if b is None:
            sl.append(slice(0, dim))
            continue
        start, stop = b
        if not (0 <= start < stop <= dim):
            raise ShapeError(f"slice bounds {b} invalid for extent {dim}")
        sl.append(slice(start, stop))
    return tuple(sl)


def _fwd_slice(inputs, attrs):
    (x,) = inputs
    return x[_norm_bounds(x, attrs["bounds"])]


def _bwd_slice(inputs, attrs, out, g):
    (x,) = inputs
    gx = np.zeros_like(x)
    gx[_norm_bounds(x, attrs["bounds"])] = g
    return [gx]


def dropout_mask(shape: tuple[int, ...], p: float, key: int) -> np.ndarray:
    """Keep-mask for dropout; fully determined by (shape, p, key)."""
    u = RngStream(key).generator().random(shape)
    return u >= p


def _fwd_dropout(inputs, attrs):
    (x,) = inputs
    p = attrs["p"]
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x.copy()
    mask = dropout_mask(x.shape, p, attrs["key"])
    return x * (mask.astype(x.dtype) / x.dtype.type(1.0 - p))


def _bwd_dropout(inputs, attrs, out, g):
    (x,) = inputs
    p = attrs["p"]
    if p == 0.0:
        return [g.copy()]
    mask = dropout_mask(x.shape, p, attrs["key"])
    return [g * (mask.astype(x.dtype) / x.dtype.type(1.0 - p))]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    arity: int | None  # None: variadic


OPS: dict[str, OpDef] = {
    "add": OpDef(_fwd_add, _bwd_add, 2),
    "mul": OpDef(_fwd_mul, _bwd_mul, 2),
    "matmul": OpDef(_fwd_matmul, _bwd_matmul, 2),
    "linear": OpDef(_fwd_linear, _bwd_linear, 3),
    "layer_norm": OpDef(_fwd_layer_norm, _bwd_layer_norm, 3),
    "softmax": OpDef(_fwd_softmax, _bwd_softmax, 1),
    "silu": OpDef(_fwd_silu, _bwd_silu, 1),
    "gelu": OpDef(_fwd_gelu, _bwd_gelu, 1),
    "relu": OpDef(_fwd_relu, _bwd_relu, 1),
    "mean": OpDef(_fwd_mean, _bwd_mean, 1),
    "conv2d": OpDef(_fwd_conv2d, _bwd_conv2d, 3),
    "conv_transpose2d": OpDef(_fwd_conv_transpose2d, _bwd_conv_transpose2d, 3),
    "max_pool2d": OpDef(_fwd_max_pool2d, _bwd_max_pool2d, 1),
    "bilinear_resize_2d": OpDef(_fwd_bilinear_resize_2d, _bwd_bilinear_resize_2d, 1),
    "reshape": OpDef(_fwd_reshape, _bwd_reshape, 1),
    "transpose": OpDef(_fwd_transpose, _bwd_transpose, 1),
    "concat": OpDef(_fwd_concat, _bwd_concat, None),
    "slice": OpDef(_fwd_slice, _bwd_slice, 1),
    "dropout": OpDef(_fwd_dropout, _bwd_dropout, 1),
}


def _as_arrays(inputs) -> list[np.ndarray]:
    arrs = []
    for inp in inputs:
        arrs.append(inp.array if isinstance(inp, Tensor) else np.asarray(inp))
    return arrs


def _resolve(op_id: str, inputs) -> OpDef:
    if op_id not in OPS:
        raise ValueError(f"unknown primitive '{op_id}'")
    op = OPS[op_id]
    if op.arity is not None and len(inputs) != op.arity:
        raise ShapeError(f"'{op_id}' takes {op.arity} inputs, got {len(inputs)}")
    return op


def forward_array(op_id: str, arrays: list[np.ndarray], attrs: dict | None = None) -> np.ndarray:
    """Raw-ndarray forward with the finiteness check; used by the Var layer."""
    op = _resolve(op_id, arrays)
    out = op.forward(arrays, attrs or {})
    _check_finite(out, op_id)
    return out


def backward_array(
    op_id: str,
    arrays: list[np.ndarray],
    upstream: np.ndarray,
    attrs: dict | None = None,
    out: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Raw-ndarray backward; one gradient per input, with finiteness checks."""
    op = _resolve(op_id, arrays)
    grads = op.backward(arrays, attrs or {}, out, upstream)
    for i, grad in enumerate(grads):
        if grad.shape != arrays[i].shape:
            raise ShapeError(
                f"'{op_id}' gradient {i} has shape {grad.shape}, expected {arrays[i].shape}"
            )
        _check_finite(grad, op_id, role=f"gradient {i}")
    return grads


def primitive_forward(op_id: str, inputs, attrs: dict | None = None) -> Tensor:
    """Evaluate one primitive on Tensor (or array) inputs."""
    out = forward_array(op_id, _as_arrays(inputs), attrs)
    return Tensor(out, check_finite=False)


def primitive_backward(op_id: str, inputs, upstream, attrs: dict | None = None) -> list[Tensor]:
    """Input gradients of one primitive given the upstream output gradient."""
    arrays = _as_arrays(inputs)
    up = upstream.array if isinstance(upstream, Tensor) else np.asarray(upstream)
    grads = backward_array(op_id, arrays, up, attrs)
    return [Tensor(grad, check_finite=False) for grad in grads]
