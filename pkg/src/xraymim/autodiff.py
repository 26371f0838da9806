"""Reverse-mode automatic differentiation over the primitive kernels.

A Var wraps an ndarray plus the recipe that produced it; backward() walks
the recorded graph in reverse topological order and accumulates gradients.
Gradients are retained on every traversed node (interpretability code reads
gradients of intermediate activations, not just leaves).

Besides the primitives in ops.py there are three fused loss nodes and the
rotary rotation, each with a hand-derived backward; their gradients are
covered by the finite-difference suite like everything else.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import ops
from .errors import DataError, NumericalError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Run forward passes without recording the graph (frozen models, eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """Graph node: value, optional gradient, and the backward recipe."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def detach(self) -> "Var":
        return Var(self.value, requires_grad=False)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Param(Var):
    """Named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.ascontiguousarray(value, dtype=np.float32), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.shape})"


def _node(value: np.ndarray, parents: tuple[Var, ...], backward_fn) -> Var:
    out = Var(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def apply(op_id: str, inputs, attrs: dict | None = None) -> Var:
    """Record one primitive application on Var inputs."""
    vars_in = tuple(_as_var(x) for x in inputs)
    arrays = [v.value for v in vars_in]
    out_val = ops.forward_array(op_id, arrays, attrs)

    def backward_fn(g, _arrays=arrays, _attrs=attrs, _out=out_val):
        return ops.backward_array(op_id, _arrays, g, _attrs, _out)

    return _node(out_val, vars_in, backward_fn)


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into .grad for every node needing it."""
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not depend on any trainable input")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if not parent.requires_grad or grad is None:
                continue
            if parent.grad is None:
                parent.grad = grad.copy()
            else:
                parent.grad += grad


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive wrappers
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    return apply("add", [a, b])


def sub(a, b) -> Var:
    return apply("add", [a, mul(b, -1.0)])


def mul(a, b) -> Var:
    if isinstance(b, (int, float)):
        a = _as_var(a)
        b = np.asarray(b, dtype=a.value.dtype)
    return apply("mul", [a, b])


def matmul(a, b) -> Var:
    return apply("matmul", [a, b])


def linear(x, w, b) -> Var:
    return apply("linear", [x, w, b])


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Var:
    return apply("layer_norm", [x, gain, bias], {"eps": eps})


def softmax(x) -> Var:
    return apply("softmax", [x])


def silu(x) -> Var:
    return apply("silu", [x])


def gelu(x) -> Var:
    return apply("gelu", [x])


def relu(x) -> Var:
    return apply("relu", [x])


def mean(x, axis: int, keepdims: bool = False) -> Var:
    return apply("mean", [x], {"axis": axis, "keepdims": keepdims})


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Var:
    return apply("conv2d", [x, w, b], {"stride": stride, "padding": padding})


def conv_transpose2d(x, w, b, stride: int = 2) -> Var:
    return apply("conv_transpose2d", [x, w, b], {"stride": stride})


def max_pool2d(x, kernel: int = 2) -> Var:
    return apply("max_pool2d", [x], {"kernel": kernel, "stride": kernel})


def bilinear_resize_2d(x, out_h: int, out_w: int) -> Var:
    return apply("bilinear_resize_2d", [x], {"out_h": out_h, "out_w": out_w})


def reshape(x, shape) -> Var:
    return apply("reshape", [x], {"shape": tuple(shape)})


def transpose(x, axes) -> Var:
    return apply("transpose", [x], {"axes": tuple(axes)})


def concat(xs, axis: int) -> Var:
    return apply("concat", list(xs), {"axis": axis})


def slice_(x, bounds) -> Var:
    return apply("slice", [x], {"bounds": tuple(bounds)})


def dropout(x, p: float, key: int, train: bool) -> Var:
    x = _as_var(x)
    if not train or p == 0.0:
        return x
    return apply("dropout", [x], {"p": float(p), "key": int(key)})


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Var:
    """Adaptive average pooling over the last two axes, built from matmuls.

    Output bin i averages source rows [floor(i*n/o), ceil((i+1)*n/o)); the
    ranges are never empty, so requesting more bins than rows replicates.
    """
    x = _as_var(x)

    def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -(-(i + 1) * n_in // n_out)
            mat[i, lo:hi] = 1.0 / (hi - lo)
        return mat.astype(x.value.dtype)

    pr = pool_matrix(x.shape[-2], out_h)
    pc = pool_matrix(x.shape[-1], out_w)
    return matmul(matmul(Var(pr), x), Var(pc.T))


# ---------------------------------------------------------------------------
# fused nodes with hand-derived backwards
# ---------------------------------------------------------------------------


def rope_rotate(x, cos: np.ndarray, sin: np.ndarray) -> Var:
    """Rotate consecutive feature pairs of x by per-(token, pair) angles.

    x: [..., N, D] with D even; cos/sin: [N, D/2]. The map is orthogonal per
    pair, so the backward pass is rotation by the negated angle.
    """
    x = _as_var(x)
    if x.shape[-1] % 2 or cos.shape != sin.shape or cos.shape != (x.shape[-2], x.shape[-1] // 2):
        raise ShapeError(
            f"rope_rotate: x {x.shape} needs cos/sin of shape {(x.shape[-2], x.shape[-1] // 2)}"
        )

    def rotate(arr, c, s):
        ev, od = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = ev * c - od * s
        out[..., 1::2] = ev * s + od * c
        return out

    c = cos.astype(x.value.dtype, copy=False)
    s = sin.astype(x.value.dtype, copy=False)
    out_val = rotate(x.value, c, s)
    ops._check_finite(out_val, "rope_rotate")

    def backward_fn(g):
        return [rotate(g, c, -s)]

    return _node(out_val, (x,), backward_fn)


def cosine_rows(a, b, eps: float = 1e-8) -> Var:
    """Cosine similarity along the last axis with a guarded denominator.

    cos = <a, b> / (|a| * |b| + eps), computed per leading index. Guarding
    keeps the value finite for zero vectors and bounds |cos| below 1.
    """
    a, b = _as_var(a), _as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    dot = np.sum(av * bv, axis=-1)
    na = np.sqrt(np.sum(av * av, axis=-1))
    nb = np.sqrt(np.sum(bv * bv, axis=-1))
    denom = na * nb + av.dtype.type(eps)
    out_val = dot / denom
    ops._check_finite(out_val, "cosine_rows")

    def backward_fn(g, tiny=1e-12):
        # d cos / d a = b/denom - dot * nb * a / (na * denom^2); symmetric in b
        na_s = np.maximum(na, tiny)
        nb_s = np.maximum(nb, tiny)
        inv = (g / denom)[..., None]
        ga = bv * inv - av * ((g * dot * nb) / (na_s * denom * denom))[..., None]
        gb = av * inv - bv * ((g * dot * na) / (nb_s * denom * denom))[..., None]
        return [ga, gb]

    return _node(out_val, (a, b), backward_fn)


def _validate_hard_labels(t: np.ndarray, what: str) -> None:
    if not np.all((t == 0) | (t == 1)):
        raise DataError(f"{what} must be 0/1 (uncertain labels must be mapped before the loss)")


def softmax_cross_entropy(logits, onehot) -> Var:
    """Mean cross-entropy over rows; targets are strict one-hot rows."""
    logits, onehot = _as_var(logits), _as_var(onehot)
    if logits.shape != onehot.shape or logits.value.ndim != 2:
        raise ShapeError(f"cross-entropy needs matching 2-d shapes, got {logits.shape}/{onehot.shape}")
    t = onehot.value
    _validate_hard_labels(t, "cross-entropy targets")
    if not np.all(t.sum(axis=-1) == 1):
        raise DataError("cross-entropy targets must be one-hot rows")
    x = logits.value
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = x.shape[0]
    out_val = np.asarray((lse - (x * t).sum(axis=-1)).mean(), dtype=x.dtype)
    ops._check_finite(out_val, "softmax_cross_entropy")

    def backward_fn(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        return [g * (p - t) / x.dtype.type(rows), None]

    return _node(out_val, (logits, onehot), backward_fn)


def sigmoid_bce(logits, targets) -> Var:
    """Mean binary cross-entropy on logits over every (row, class) entry."""
    logits, targets = _as_var(logits), _as_var(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce shape mismatch: {logits.shape} vs {targets.shape}")
    t = targets.value
    _validate_hard_labels(t, "bce targets")
    x = logits.value
    # stable form: max(x,0) - x*t + log1p(exp(-|x|))
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_val = np.asarray(per.mean(), dtype=x.dtype)
    ops._check_finite(out_val, "sigmoid_bce")

    def backward_fn(g):
        return [g * (expit(x) - t) / x.dtype.type(x.size), None]

    return _node(out_val, (logits, targets), backward_fn)


def check_loss_finite(loss: Var, context: str) -> None:
    if not np.isfinite(loss.value):
        raise NumericalError(f"loss diverged ({context})")
