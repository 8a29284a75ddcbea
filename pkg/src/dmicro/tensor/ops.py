"""Elementwise, reduction and shape operators.

Binary operators accept equal shapes or a scalar operand (a Python number or
a size-1 tensor); anything else is a shape error. Use :func:`expand` for an
explicit broadcast.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .core import Tensor


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Collapse a gradient onto a scalar operand when it was broadcast."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_binary(a, b, "mul")

    def bw(g):
        ga = _reduce_to(g * b.data, a) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_binary(a, b, "div")

    def bw(g):
        ga = _reduce_to(g / b.data, a) if a.requires_grad else None
        gb = _reduce_to(-g * a.data / (b.data * b.data), b) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data / b.data, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), bw, "scale")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input (clamp first)")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype, copy=False),)

    return Tensor._result(out, (a,), bw, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return Tensor._result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return Tensor._result(np.log(a.data), (a,), bw, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask

    def bw(g):
        return (g * mask,)

    return Tensor._result(out, (a,), bw, "relu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    out = np.where(mask, a.data, np.asarray(lo, dtype=a.dtype))

    def bw(g):
        return (g * mask,)

    return Tensor._result(out, (a,), bw, "clamp_min")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def bw(g):
        return (g * sgn,)

    return Tensor._result(np.abs(a.data), (a,), bw, "abs")


def sigmoid(a: Tensor) -> Tensor:
    return custom_sigmoid(1.0, a)


def custom_sigmoid(m: float, x: Tensor) -> Tensor:
    """Slope-controlled logistic ``1 / (1 + exp(-m x))``."""
    if not m > 0:
        raise ValueError(f"custom_sigmoid: slope m must be positive, got {m}")
    x = as_tensor(x)
    out = expit(x.data * np.asarray(m, dtype=x.dtype))

    def bw(g):
        return (g * (m * out * (1 - out)),)

    return Tensor._result(out, (x,), bw, "custom_sigmoid")


_UNARY = {"sqrt": sqrt, "exp": exp, "relu": relu, "log": log, "abs": absolute}
_BINARY = {"add": add, "subtract": sub, "sub": sub, "multiply": mul, "mul": mul, "divide": div, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operator by name.

    ``scalar-multiply`` and ``clamp-min`` take a Python number as ``b``.
    """
    a = as_tensor(a)
    kind = op_kind.replace("_", "-")
    if kind in ("scalar-multiply", "scale"):
        return scale(a, float(b))
    if kind == "clamp-min":
        return clamp_min(a, float(b))
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions and shapes -----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._result(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._result(out, (a,), bw, "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums the copies."""
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    lead = len(shape) - a.ndim
    summed = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(a.shape) if s == 1 and shape[lead + i] != 1
    )

    def bw(g):
        r = g.sum(axis=summed, keepdims=True) if summed else g
        return (r.reshape(a.shape),)

    return Tensor._result(out, (a,), bw, "expand")


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), bw, "getitem")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), bw, "concat")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Fused mean absolute difference; sign(0) = 0 in the backward pass."""
    if a.shape != b.shape:
        raise ValueError(f"l1: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n, dtype=a.dtype)

    def bw(g):
        s = np.sign(diff) * (g / n)
        return (s if a.requires_grad else None, -s if b.requires_grad else None)

    return Tensor._result(out, (a, b), bw, "l1")
