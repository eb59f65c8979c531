"""Differentiable primitives.

Each function computes its value with numpy and registers a backward rule
returning one gradient per parent (``None`` where a parent needs none).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node, prod

__all__ = [
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "layer_norm",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "swapaxes",
    "broadcast_to",
    "concat",
    "getitem",
    "cosine_similarity",
    "bce_with_logits",
    "softmax_cross_entropy",
    "kl_div",
]


# -- broadcasting ------------------------------------------------------------------

def _is_scalar(shape: tuple[int, ...]) -> bool:
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"{op}: cannot combine shapes {a} and {b} (only equal, scalar or trailing-suffix shapes)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _is_scalar(shape):
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# -- elementwise arithmetic --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    out = a.data - b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: denominator contains zeros")
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 1 or B.ndim < 2:
        raise ShapeError(f"matmul: need at least 1-D @ 2-D, got {A.shape} @ {B.shape}")
    if B.ndim == 2:
        if A.shape[-1] != B.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {A.shape} @ {B.shape}")
        out = A @ B
        k, n = B.shape

        def backward(g):
            ga = g @ B.T if a.requires_grad else None
            gb = A.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

    else:
        if A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2] or A.shape[-1] != B.shape[-2]:
            raise ShapeError(f"matmul: batched shapes do not conform, {A.shape} @ {B.shape}")
        out = A @ B

        def backward(g):
            ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    flops = 2 * prod(out.shape) * A.shape[-1]
    return make_node(out, (a, b), backward, "matmul", flops=flops)


# -- unary nonlinearities ----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(a.data)
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid", flops=4 * a.size)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), backward, "gelu", flops=8 * a.size)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax", flops=5 * a.size)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return make_node(out, (a,), backward, "layer_norm", flops=7 * a.size)


# -- reductions and shape manipulation ---------------------------------------------

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "sum", flops=a.size)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = prod([a.shape[ax] for ax in axes])
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "mean", flops=a.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape", flops=0)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose", flops=0)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)
    return make_node(out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes", flops=0)


def broadcast_to(a, shape) -> Tensor:
    """Explicit expansion (numpy rules); the only way to broadcast beyond row vectors."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g,)

    return make_node(out, (a,), backward, "broadcast_to", flops=0)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index = [slice(None)] * ndim
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return make_node(out, tensors, backward, "concat", flops=0)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = out.copy()

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(out, (a,), backward, "getitem", flops=0)


# -- composite losses and similarities --------------------------------------------

def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``.

    Norms are clamped below at ``eps``, so a zero vector has similarity 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    dot = (x * y).sum(axis=axis, keepdims=True)
    nx_raw = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    ny_raw = np.sqrt((y * y).sum(axis=axis, keepdims=True))
    nx = np.maximum(nx_raw, eps)
    ny = np.maximum(ny_raw, eps)
    cos = dot / (nx * ny)
    out = np.squeeze(cos, axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            corr = np.where(nx_raw > eps, cos / (nx * nx), 0.0) * x
            ga = g * (y / (nx * ny) - corr)
        if b.requires_grad:
            corr = np.where(ny_raw > eps, cos / (ny * ny), 0.0) * y
            gb = g * (x / (nx * ny) - corr)
        return ga, gb

    return make_node(out, (a, b), backward, "cosine_similarity", flops=6 * a.size)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: shapes differ, {logits.shape} vs {targets.shape}")
    x, y = logits.data, targets.data
    n = x.size
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean())

    def backward(g):
        p = _stable_sigmoid(x)
        gx = g * (p - y) / n if logits.requires_grad else None
        gy = g * (-x) / n if targets.requires_grad else None
        return gx, gy

    return make_node(out, (logits, targets), backward, "bce_with_logits", flops=6 * n)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of ``(B, C)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lsm = _log_softmax(logits.data)
    rows = np.arange(labels.size)
    out = np.asarray(-lsm[rows, labels].mean())

    def backward(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return (g * grad / labels.size,)

    return make_node(out, (logits,), backward, "softmax_cross_entropy", flops=6 * logits.size)


def kl_div(teacher_logits, student_logits, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(softmax(teacher / T) || softmax(student / T)) over the last axis."""
    t, s = as_tensor(teacher_logits), as_tensor(student_logits)
    if t.shape != s.shape:
        raise ShapeError(f"kl_div: widths differ, {t.shape} vs {s.shape}")
    if temperature <= 0:
        raise ValueError("kl_div: temperature must be positive")
    batch = prod(t.shape[:-1]) if t.ndim > 1 else 1
    log_p = _log_softmax(t.data / temperature)
    log_q = _log_softmax(s.data / temperature)
    p = np.exp(log_p)
    per = (p * (log_p - log_q)).sum(axis=-1, keepdims=True)
    out = np.asarray(per.sum() / batch)

    def backward(g):
        gt = gs = None
        if s.requires_grad:
            gs = g * (np.exp(log_q) - p) / (temperature * batch)
        if t.requires_grad:
            gt = g * p * ((log_p - log_q) - per) / (temperature * batch)
        return gt, gs

    return make_node(out, (t, s), backward, "kl_div", flops=8 * t.size)
