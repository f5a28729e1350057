"""Rank-2 dense tensors.

Tensors are plain read-only numpy arrays of shape ``(rows, cols)``. Every
public operation checks shapes up front and finiteness of its result, so a
NaN or Inf surfaces at the operation that produced it rather than several
nodes later.

Element precision defaults to double. Set ``DYNFLOW_DTYPE=float32`` (or call
:func:`set_default_dtype`) before building models for single-precision
throughput runs.
"""
import os

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_DTYPES = {"float64": np.float64, "double": np.float64, "float32": np.float32, "single": np.float32}
_default_dtype = np.dtype(_DTYPES[os.environ.get("DYNFLOW_DTYPE", "float64").lower()])


def default_dtype():
    return _default_dtype


def set_default_dtype(name):
    global _default_dtype
    try:
        _default_dtype = np.dtype(_DTYPES[str(name).lower()])
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None
    return _default_dtype


def _finite(a, op):
    if not kernels.all_finite(a):
        raise NonFiniteError(f"{op} produced non-finite values")
    return a


def _freeze(a):
    a.flags.writeable = False
    return a


def tensor(data, dtype=None):
    """Build a read-only rank-2 tensor. Scalars become 1x1, vectors 1xN."""
    a = np.array(data, dtype=dtype or _default_dtype, order="C")
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} tensors are not supported (shape {a.shape})")
    return _freeze(_finite(a, "tensor"))


def zeros(rows, cols, dtype=None):
    return _freeze(np.zeros((rows, cols), dtype=dtype or _default_dtype))


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _freeze(_finite(kernels.matmul(a, b), "matmul"))


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return _freeze(_finite(fn(a, b), op))


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def scale(a, c):
    return _freeze(_finite(a * a.dtype.type(c), "scale"))


def transpose(a):
    return _freeze(np.ascontiguousarray(a.T))


def hcat(parts):
    """Concatenate along columns; all parts need the same row count."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"hcat: row counts differ {[p.shape for p in parts]}")
    return _freeze(np.concatenate(parts, axis=1))


def vcat(parts):
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"vcat: column counts differ {[p.shape for p in parts]}")
    return _freeze(np.concatenate(parts, axis=0))


def hsplit(a, widths):
    if sum(widths) != a.shape[1]:
        raise ShapeError(f"hsplit: widths {list(widths)} do not sum to {a.shape[1]}")
    out, start = [], 0
    for w in widths:
        out.append(_freeze(np.ascontiguousarray(a[:, start:start + w])))
        start += w
    return out


def vsplit(a, heights):
    if sum(heights) != a.shape[0]:
        raise ShapeError(f"vsplit: heights {list(heights)} do not sum to {a.shape[0]}")
    out, start = [], 0
    for h in heights:
        out.append(_freeze(a[start:start + h]))
        start += h
    return out


def sum_rows(a):
    return _freeze(a.sum(axis=0, keepdims=True))


# activations -------------------------------------------------------------


def relu(x):
    return _freeze(kernels.relu(x))


def relu_grad(x, g):
    """Input gradient of relu at ``x`` given upstream gradient ``g``."""
    return _freeze(kernels.relu_backward(x, g))


def sigmoid(x):
    return _freeze(kernels.sigmoid(x))


def sigmoid_grad(x, g):
    s = kernels.sigmoid(x)
    return _freeze(_finite(g * s * (1 - s), "sigmoid_grad"))


def tanh(x):
    return _freeze(np.tanh(x))


def tanh_grad(x, g):
    t = np.tanh(x)
    return _freeze(_finite(g * (1 - t * t), "tanh_grad"))


def softmax_rows(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return _freeze(_finite(z / z.sum(axis=1, keepdims=True), "softmax_rows"))


def softmax_rows_grad(x, g):
    s = softmax_rows(x)
    return _freeze(_finite(s * (g - (g * s).sum(axis=1, keepdims=True)), "softmax_rows_grad"))


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    return _freeze(_finite(x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True)), "log_softmax_rows"))


# parameterized transforms --------------------------------------------------


def linear(x, w, b):
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return _freeze(_finite(kernels.linear_forward(x, w, b), "linear"))


def linear_grads(x, w, g):
    """``(dx, dw, db)`` of ``x @ w + b`` for upstream gradient ``g``."""
    if g.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"linear_grads: input {x.shape}, weight {w.shape}, upstream {g.shape}")
    dx, dw, db = kernels.linear_backward(x, w, g)
    return _freeze(_finite(dx, "linear dx")), _finite(dw, "linear dw"), _finite(db, "linear db")
