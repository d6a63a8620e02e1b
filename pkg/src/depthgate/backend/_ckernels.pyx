# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused float32 kernels for the hot non-BLAS operations.

Same signatures and semantics as np_kernels; single-pass loops avoid the
temporaries the NumPy versions allocate, which matters at the small tensor
sizes this package runs at.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport expf, sqrtf, logf, INFINITY

cnp.import_array()

ctypedef cnp.float32_t f32


def rmsnorm_fwd(cnp.ndarray[f32, ndim=2] x, cnp.ndarray[f32, ndim=1] w, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[f32, ndim=2] y = np.empty((n, d), dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=1] inv_rms = np.empty(n, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef double acc
    cdef float r
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += <double>x[i, j] * <double>x[i, j]
        r = <f32>(1.0 / sqrtf(<float>(acc / d + eps)))
        inv_rms[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * w[j]
    return y, inv_rms


def rmsnorm_bwd(cnp.ndarray[f32, ndim=2] x, cnp.ndarray[f32, ndim=1] w,
                cnp.ndarray[f32, ndim=1] inv_rms, cnp.ndarray[f32, ndim=2] gy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[f32, ndim=2] gx = np.empty((n, d), dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=1] gw = np.zeros(d, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef double dot
    cdef float r, coef
    for i in range(n):
        r = inv_rms[i]
        dot = 0.0
        for j in range(d):
            dot += <double>gy[i, j] * <double>w[j] * <double>x[i, j]
        coef = <f32>(r * r * r * dot / d)
        for j in range(d):
            gx[i, j] = gy[i, j] * w[j] * r - x[i, j] * coef
            gw[j] += gy[i, j] * x[i, j] * r
    return gx, gw


def softmax_fwd(cnp.ndarray[f32, ndim=2] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[f32, ndim=2] y = np.empty((n, d), dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float m
    cdef double z
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(d):
            y[i, j] = expf(x[i, j] - m)
            z += y[i, j]
        for j in range(d):
            y[i, j] = <f32>(y[i, j] / z)
    return y


def softmax_bwd(cnp.ndarray[f32, ndim=2] y, cnp.ndarray[f32, ndim=2] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1]
    cdef cnp.ndarray[f32, ndim=2] gx = np.empty((n, d), dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += <double>y[i, j] * <double>gy[i, j]
        for j in range(d):
            gx[i, j] = <f32>(y[i, j] * (gy[i, j] - dot))
    return gx


def causal_softmax_fwd(cnp.ndarray[f32, ndim=3] x, Py_ssize_t offset):
    cdef Py_ssize_t b = x.shape[0], q = x.shape[1], k = x.shape[2]
    cdef cnp.ndarray[f32, ndim=3] y = np.zeros((b, q, k), dtype=np.float32)
    cdef Py_ssize_t ib, i, j, lim
    cdef float m
    cdef double z
    for ib in range(b):
        for i in range(q):
            lim = offset + i + 1
            if lim > k:
                lim = k
            m = -INFINITY
            for j in range(lim):
                if x[ib, i, j] > m:
                    m = x[ib, i, j]
            z = 0.0
            for j in range(lim):
                y[ib, i, j] = expf(x[ib, i, j] - m)
                z += y[ib, i, j]
            for j in range(lim):
                y[ib, i, j] = <f32>(y[ib, i, j] / z)
    return y


def causal_softmax_bwd(cnp.ndarray[f32, ndim=3] y, cnp.ndarray[f32, ndim=3] gy):
    cdef Py_ssize_t b = y.shape[0], q = y.shape[1], k = y.shape[2]
    cdef cnp.ndarray[f32, ndim=3] gx = np.empty((b, q, k), dtype=np.float32)
    cdef Py_ssize_t ib, i, j
    cdef double dot
    for ib in range(b):
        for i in range(q):
            dot = 0.0
            for j in range(k):
                dot += <double>y[ib, i, j] * <double>gy[ib, i, j]
            for j in range(k):
                gx[ib, i, j] = <f32>(y[ib, i, j] * (gy[ib, i, j] - dot))
    return gx


def cross_entropy_fwd(cnp.ndarray[f32, ndim=2] logits, cnp.ndarray[cnp.int64_t, ndim=1] targets):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    cdef cnp.ndarray[f32, ndim=2] probs = np.empty((n, v), dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float m
    cdef double z, total = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(v):
            probs[i, j] = expf(logits[i, j] - m)
            z += probs[i, j]
        for j in range(v):
            probs[i, j] = <f32>(probs[i, j] / z)
        total += (m + logf(<float>z)) - logits[i, targets[i]]
    return total / n, probs


def cross_entropy_bwd(cnp.ndarray[f32, ndim=2] probs, cnp.ndarray[cnp.int64_t, ndim=1] targets,
                      double gloss):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1]
    cdef cnp.ndarray[f32, ndim=2] g = np.empty((n, v), dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float s = <f32>(gloss / n)
    for i in range(n):
        for j in range(v):
            g[i, j] = probs[i, j] * s
        g[i, targets[i]] -= s
    return g


def sigmoid_fwd(cnp.ndarray[f32, ndim=1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[f32, ndim=1] y = np.empty(n, dtype=np.float32)
    cdef Py_ssize_t i
    cdef float e
    for i in range(n):
        if x[i] >= 0:
            y[i] = 1.0 / (1.0 + expf(-x[i]))
        else:
            e = expf(x[i])
            y[i] = e / (1.0 + e)
    return y
