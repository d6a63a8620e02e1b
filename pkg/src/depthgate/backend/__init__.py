"""Kernel backend selection.

Two interchangeable implementations of the fused kernels exist: a compiled
Cython extension (``_ckernels``) and a pure-NumPy fallback (``np_kernels``).
The active one is chosen at import time:

* ``DEPTHGATE_KERNELS=auto`` (default): use the extension if it imported,
  otherwise NumPy.
* ``DEPTHGATE_KERNELS=numpy``: force the NumPy fallback.
* ``DEPTHGATE_KERNELS=cython``: require the extension; raise if missing.

All exported functions accept float32 arrays in the shapes documented in
``np_kernels`` and normalize contiguity/dtype before dispatch, so callers
may pass views.
"""
import os

import numpy as np

from depthgate.backend import np_kernels

try:
    from depthgate.backend import _ckernels
except ImportError:
    _ckernels = None

_mode = os.environ.get("DEPTHGATE_KERNELS", "auto").lower()
if _mode not in ("auto", "numpy", "cython"):
    raise RuntimeError(
        "DEPTHGATE_KERNELS must be one of auto/numpy/cython, got %r" % _mode)
if _mode == "cython" and _ckernels is None:
    raise RuntimeError(
        "DEPTHGATE_KERNELS=cython but the compiled extension is not available; "
        "reinstall with Cython and a C compiler present")

if _mode == "numpy" or _ckernels is None:
    ACTIVE = "numpy"
    _impl = np_kernels
else:
    ACTIVE = "cython"
    _impl = _ckernels


def _f32(x):
    return np.ascontiguousarray(x, dtype=np.float32)


def rmsnorm_fwd(x, w, eps):
    return _impl.rmsnorm_fwd(_f32(x), _f32(w), float(eps))


def rmsnorm_bwd(x, w, inv_rms, gy):
    return _impl.rmsnorm_bwd(_f32(x), _f32(w), _f32(inv_rms), _f32(gy))


def softmax_fwd(x):
    return _impl.softmax_fwd(_f32(x))


def softmax_bwd(y, gy):
    return _impl.softmax_bwd(_f32(y), _f32(gy))


def causal_softmax_fwd(x, offset):
    return _impl.causal_softmax_fwd(_f32(x), int(offset))


def causal_softmax_bwd(y, gy):
    return _impl.causal_softmax_bwd(_f32(y), _f32(gy))


def cross_entropy_fwd(logits, targets):
    return _impl.cross_entropy_fwd(
        _f32(logits), np.ascontiguousarray(targets, dtype=np.int64))


def cross_entropy_bwd(probs, targets, gloss):
    return _impl.cross_entropy_bwd(
        _f32(probs), np.ascontiguousarray(targets, dtype=np.int64), float(gloss))


def sigmoid(x):
    arr = _f32(x)
    if ACTIVE == "cython":
        return _impl.sigmoid_fwd(arr.ravel()).reshape(arr.shape)
    return _impl.sigmoid_fwd(arr)
