"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is missing or when
``DYNFLOW_KERNELS=python`` is set. Signatures and results match the
extension up to floating-point summation order.
"""
import numpy as np

BACKEND = "python"


def matmul(a, b):
    return a @ b


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(x, w, g):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b`` given ``g = dL/dy``."""
    return g @ w.T, x.T @ g, g.sum(axis=0, keepdims=True)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, g):
    return g * (x > 0)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def add_inplace(acc, g):
    acc += g


def all_finite(a):
    return bool(np.isfinite(a).all())
