"""Parity between the compiled kernels and the NumPy fallback."""
import subprocess
import sys

import numpy as np
import pytest

from depthgate.backend import np_kernels

try:
    from depthgate.backend import _ckernels
except ImportError:
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None,
                               reason="compiled extension not built")


def _close(a, b, tol=1e-5):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) < tol


@needs_ext
def test_rmsnorm_parity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32)).astype(np.float32)
    w = rng.standard_normal(32).astype(np.float32)
    gy = rng.standard_normal((16, 32)).astype(np.float32)
    yc, rc = _ckernels.rmsnorm_fwd(x, w, 1e-5)
    yn, rn = np_kernels.rmsnorm_fwd(x, w, 1e-5)
    _close(yc, yn)
    _close(rc, rn)
    gxc, gwc = _ckernels.rmsnorm_bwd(x, w, rc, gy)
    gxn, gwn = np_kernels.rmsnorm_bwd(x, w, rn, gy)
    _close(gxc, gxn)
    _close(gwc, gwn, tol=1e-4)


@needs_ext
def test_softmax_parity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 64)).astype(np.float32) * 3.0
    gy = rng.standard_normal((8, 64)).astype(np.float32)
    yc = _ckernels.softmax_fwd(x)
    yn = np_kernels.softmax_fwd(x)
    _close(yc, yn, tol=1e-6)
    _close(_ckernels.softmax_bwd(yc, gy), np_kernels.softmax_bwd(yn, gy))


@needs_ext
def test_causal_softmax_parity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6, 9)).astype(np.float32)
    gy = rng.standard_normal((4, 6, 9)).astype(np.float32)
    yc = _ckernels.causal_softmax_fwd(x, 3)
    yn = np_kernels.causal_softmax_fwd(x, 3)
    _close(yc, yn, tol=1e-6)
    assert np.all((yc == 0.0) == (yn == 0.0))
    _close(_ckernels.causal_softmax_bwd(yc, gy),
           np_kernels.causal_softmax_bwd(yn, gy))


@needs_ext
def test_cross_entropy_parity():
    rng = np.random.default_rng(3)
    logits = (rng.standard_normal((12, 40)) * 2.0).astype(np.float32)
    targets = rng.integers(0, 40, size=12)
    lc, pc = _ckernels.cross_entropy_fwd(logits, targets.astype(np.int64))
    ln, pn = np_kernels.cross_entropy_fwd(logits, targets.astype(np.int64))
    assert abs(lc - ln) < 1e-6
    _close(pc, pn, tol=1e-6)
    _close(_ckernels.cross_entropy_bwd(pc, targets.astype(np.int64), 1.0),
           np_kernels.cross_entropy_bwd(pn, targets.astype(np.int64), 1.0),
           tol=1e-7)


@needs_ext
def test_sigmoid_parity():
    x = np.linspace(-40, 40, 101).astype(np.float32)
    _close(_ckernels.sigmoid_fwd(x), np_kernels.sigmoid_fwd(x), tol=1e-7)


def _active_for(env_value):
    code = "from depthgate import backend; print(backend.ACTIVE)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "DEPTHGATE_KERNELS": env_value})
    return out


def test_env_var_forces_numpy():
    out = _active_for("numpy")
    assert out.returncode == 0
    assert out.stdout.strip() == "numpy"


def test_env_var_rejects_unknown_value():
    out = _active_for("fortran")
    assert out.returncode != 0
    assert "DEPTHGATE_KERNELS" in out.stderr
