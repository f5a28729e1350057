"""Hot-kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
not built or when ``DYNFLOW_KERNELS=python``. ``DYNFLOW_KERNELS=cython``
makes a missing extension an import error instead of a silent fallback.
"""
import logging
import os

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)


def _load(choice):
    if choice == "python":
        return _kernels_py
    try:
        from . import _kernels
    except ImportError:
        if choice == "cython":
            raise
        log.info("compiled kernels unavailable, using numpy fallback")
        return _kernels_py
    return _kernels


_impl = _load(os.environ.get("DYNFLOW_KERNELS", "auto").lower())
BACKEND = _impl.BACKEND


def use(choice):
    """Switch backend at runtime (``"cython"``, ``"python"`` or ``"auto"``)."""
    global _impl, BACKEND
    _impl = _load(choice)
    BACKEND = _impl.BACKEND
    return BACKEND


def _c(a):
    return np.ascontiguousarray(a)


def matmul(a, b):
    return _impl.matmul(_c(a), _c(b))


def linear_forward(x, w, b):
    return _impl.linear_forward(_c(x), _c(w), _c(b))


def linear_backward(x, w, g):
    return _impl.linear_backward(_c(x), _c(w), _c(g))


def relu(x):
    return _impl.relu(_c(x))


def relu_backward(x, g):
    return _impl.relu_backward(_c(x), _c(g))


def sigmoid(x):
    return _impl.sigmoid(_c(x))


def add_inplace(acc, g):
    _impl.add_inplace(acc, _c(g))


def all_finite(a):
    if a.dtype.kind != "f" or a.ndim != 2:
        return bool(np.isfinite(a).all())
    return _impl.all_finite(_c(a))
