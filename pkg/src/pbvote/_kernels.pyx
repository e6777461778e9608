# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense-chain kernels (same contract as pbvote._purekernels).

Matrix products go straight to BLAS dgemm; bias, leaky-ReLU and tanh run in
fused C loops, which removes the per-layer temporary traffic and python
dispatch the numpy fallback pays for inside attack and training loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh as ctanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_nt(double[:, ::1] A, double[:, ::1] Bm, double[:, ::1] C) noexcept nogil:
    # row-major C (m, n) = A (m, k) @ Bm (n, k)^T
    cdef int m = A.shape[0], k = A.shape[1], n = Bm.shape[0]
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &n, &m, &k, &one, &Bm[0, 0], &k, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef void _gemm_nn(double[:, ::1] A, double[:, ::1] Bm, double[:, ::1] C) noexcept nogil:
    # row-major C (m, n) = A (m, k) @ Bm (k, n)
    cdef int m = A.shape[0], k = A.shape[1], n = Bm.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, &Bm[0, 0], &n, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef void _gemm_tn(double[:, ::1] A, double[:, ::1] Bm, double[:, ::1] C) noexcept nogil:
    # row-major C (k, n) = A (m, k)^T @ Bm (m, n)
    cdef int m = A.shape[0], k = A.shape[1], n = Bm.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "T", &n, &k, &m, &one, &Bm[0, 0], &n, &A[0, 0], &k, &zero, &C[0, 0], &n)


def fwd(double[::1] w, cnp.int64_t[::1] dims, double[:, ::1] X, double slope):
    """Forward pass: returns (scores (B,), hidden activations per layer)."""
    cdef int n_layers = dims.shape[0] - 1
    cdef int B = X.shape[0]
    cdef Py_ssize_t off = 0
    cdef int layer, fan_in, fan_out, i, j
    cdef double z
    cdef double[:, ::1] a = X
    cdef double[:, ::1] zmat, W
    cdef double[::1] scores, bias
    hidden = []
    scores_arr = np.empty(B, dtype=np.float64)
    scores = scores_arr
    for layer in range(n_layers):
        fan_in = <int> dims[layer]
        fan_out = <int> dims[layer + 1]
        W = np.asarray(w[off:off + fan_in * fan_out]).reshape(fan_out, fan_in)
        off += fan_in * fan_out
        bias = w[off:off + fan_out]
        off += fan_out
        zarr = np.empty((B, fan_out), dtype=np.float64)
        zmat = zarr
        _gemm_nt(a, W, zmat)
        if layer == n_layers - 1:
            for i in range(B):
                scores[i] = ctanh(zmat[i, 0] + bias[0])
        else:
            for i in range(B):
                for j in range(fan_out):
                    z = zmat[i, j] + bias[j]
                    zmat[i, j] = z if z >= 0.0 else slope * z
            hidden.append(zarr)
            a = zmat
    return scores_arr, hidden


def bwd(double[::1] w, cnp.int64_t[::1] dims, double[:, ::1] X, hidden,
        double[::1] scores, double[::1] dscore, double slope,
        bint need_wgrad, bint need_xgrad):
    """Backward pass from per-example score gradients.

    Weight gradients are summed over the batch; returns (gw or None,
    gX (B, d) or None).
    """
    cdef int n_layers = dims.shape[0] - 1
    cdef int B = X.shape[0]
    cdef int layer, fan_in, fan_out, i, j
    cdef double s, acc
    offsets = []
    cdef Py_ssize_t off = 0
    for layer in range(n_layers):
        offsets.append(off)
        off += (<Py_ssize_t> dims[layer]) * dims[layer + 1] + dims[layer + 1]

    gw_arr = np.zeros(off, dtype=np.float64) if need_wgrad else None
    cdef double[::1] gw
    if need_wgrad:
        gw = gw_arr

    dz_arr = np.empty((B, 1), dtype=np.float64)
    cdef double[:, ::1] dz = dz_arr
    for i in range(B):
        s = scores[i]
        dz[i, 0] = dscore[i] * (1.0 - s * s)

    cdef double[:, ::1] a_in, da, W, gW
    cdef double[::1] gb
    for layer in range(n_layers - 1, -1, -1):
        fan_in = <int> dims[layer]
        fan_out = <int> dims[layer + 1]
        off = offsets[layer]
        W_arr = np.asarray(w[off:off + fan_in * fan_out]).reshape(fan_out, fan_in)
        W = W_arr
        if layer > 0:
            a_in = hidden[layer - 1]
        else:
            a_in = X
        if need_wgrad:
            gW = np.asarray(gw[off:off + fan_in * fan_out]).reshape(fan_out, fan_in)
            _gemm_tn(dz, a_in, gW)
            gb = gw[off + fan_in * fan_out:off + fan_in * fan_out + fan_out]
            for j in range(fan_out):
                acc = 0.0
                for i in range(B):
                    acc += dz[i, j]
                gb[j] = acc
        if layer == 0 and not need_xgrad:
            return gw_arr, None
        da_arr = np.empty((B, fan_in), dtype=np.float64)
        da = da_arr
        _gemm_nn(dz, W, da)
        if layer > 0:
            a_in = hidden[layer - 1]
            for i in range(B):
                for j in range(fan_in):
                    if a_in[i, j] < 0.0:
                        da[i, j] *= slope
            dz = da
    return gw_arr, da_arr
