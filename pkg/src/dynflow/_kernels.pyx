# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the linear/activation hot path.

Matrix products go straight to BLAS gemm and every loop runs without the
GIL, so worker threads hosting different nodes compute concurrently. Bias
addition and the bias gradient are fused into the same call, which removes
most of the per-call overhead on the small row-vector shapes that dominate
per-instance training. Inputs must be C-contiguous 2-D float32 or float64
arrays of one dtype; the wrappers in ``dynflow.kernels`` ensure it.
"""
import numpy as np
from scipy.linalg.cython_blas cimport dgemm, sgemm

# numpy's SIMD tanh and isfinite beat scalar loops over libm
from ._kernels_py import all_finite, sigmoid  # noqa: F401

ctypedef fused real:
    float
    double

BACKEND = "cython"


cdef void _gemm(char ta, char tb, int m, int n, int k, const real* a, int lda,
                const real* b, int ldb, real* c, int ldc) noexcept nogil:
    # column-major C(m x n) = op(A) @ op(B)
    cdef double done = 1.0, dzero = 0.0
    cdef float sone = 1.0, szero = 0.0
    if m == 0 or n == 0:
        return
    if real is double:
        dgemm(&ta, &tb, &m, &n, &k, &done, <double*>a, &lda, <double*>b, &ldb, &dzero, c, &ldc)
    else:
        sgemm(&ta, &tb, &m, &n, &k, &sone, <float*>a, &lda, <float*>b, &ldb, &szero, c, &ldc)


cdef void _matmul(const real[:, ::1] a, const real[:, ::1] b, real[:, ::1] out) noexcept nogil:
    # row-major out = a @ b computed as column-major out^T = b^T @ a^T
    cdef int n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j
    if k == 0:
        for i in range(n):
            for j in range(m):
                out[i, j] = 0
        return
    _gemm(c'N', c'N', m, n, k, &b[0, 0], m, &a[0, 0], k, &out[0, 0], m)


def matmul(const real[:, ::1] a, const real[:, ::1] b):
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.asarray(a).dtype)
    cdef real[:, ::1] o = out
    with nogil:
        _matmul(a, b, o)
    return out


def linear_forward(const real[:, ::1] x, const real[:, ::1] w, const real[:, ::1] b):
    cdef Py_ssize_t n = x.shape[0], m = w.shape[1], i, j
    out = np.empty((n, m), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] o = out
    with nogil:
        _matmul(x, w, o)
        for i in range(n):
            for j in range(m):
                o[i, j] += b[0, j]
    return out


def linear_backward(const real[:, ::1] x, const real[:, ::1] w, const real[:, ::1] g):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b`` given ``g = dL/dy``."""
    cdef int n = x.shape[0], k = x.shape[1], m = w.shape[1]
    cdef Py_ssize_t i, j
    dt = np.asarray(x).dtype
    dx_arr = np.zeros((n, k), dtype=dt)
    dw_arr = np.zeros((k, m), dtype=dt)
    db_arr = np.zeros((1, m), dtype=dt)
    cdef real[:, ::1] dx = dx_arr
    cdef real[:, ::1] dw = dw_arr
    cdef real[:, ::1] db = db_arr
    with nogil:
        if n and k and m:
            # dx (n x k) = g @ w^T ; column-major dx^T = w @ g^T
            _gemm(c'T', c'N', k, n, m, &w[0, 0], m, &g[0, 0], m, &dx[0, 0], k)
            # dw (k x m) = x^T @ g ; column-major dw^T = g^T @ x
            _gemm(c'N', c'T', m, k, n, &g[0, 0], m, &x[0, 0], k, &dw[0, 0], m)
        for i in range(n):
            for j in range(m):
                db[0, j] += g[i, j]
    return dx_arr, dw_arr, db_arr


def relu(const real[:, ::1] x):
    cdef Py_ssize_t size = x.shape[0] * x.shape[1], k
    out = np.empty((x.shape[0], x.shape[1]), dtype=np.asarray(x).dtype)
    if size == 0:
        return out
    cdef real[:, ::1] o = out
    cdef const real* xp = &x[0, 0]
    cdef real* op = &o[0, 0]
    with nogil:
        # flat branchless loop so the compiler vectorizes it; random signs would mispredict a branch
        for k in range(size):
            op[k] = xp[k] * (xp[k] > 0)
    return out


def relu_backward(const real[:, ::1] x, const real[:, ::1] g):
    cdef Py_ssize_t size = x.shape[0] * x.shape[1], k
    out = np.empty((x.shape[0], x.shape[1]), dtype=np.asarray(x).dtype)
    if size == 0:
        return out
    cdef real[:, ::1] o = out
    cdef const real* xp = &x[0, 0]
    cdef const real* gp = &g[0, 0]
    cdef real* op = &o[0, 0]
    with nogil:
        for k in range(size):
            op[k] = gp[k] * (xp[k] > 0)
    return out


def add_inplace(real[:, ::1] acc, const real[:, ::1] g):
    cdef Py_ssize_t n = acc.shape[0], m = acc.shape[1], i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                acc[i, j] += g[i, j]
