"""NumPy reference implementations of the fused kernels.

Shapes are normalized by the caller: rmsnorm/softmax/cross-entropy take
2-D row-major arrays, causal softmax takes a 3-D (batch, q, k) stack.
All kernels are pure functions; backward variants recompute nothing that
the forward already cached.
"""
import numpy as np


def rmsnorm_fwd(x, w, eps):
    # x: (n, d), w: (d,) -> y, inv_rms (n,)
    ms = np.mean(x * x, axis=1) + eps
    inv_rms = 1.0 / np.sqrt(ms)
    y = x * inv_rms[:, None] * w[None, :]
    return y.astype(x.dtype, copy=False), inv_rms.astype(x.dtype, copy=False)


def rmsnorm_bwd(x, w, inv_rms, gy):
    d = x.shape[1]
    gxw = gy * w[None, :]
    # y = x * inv_rms * w; d(inv_rms)/dx_j = -inv_rms^3 * x_j / d
    dot = np.sum(gxw * x, axis=1)
    gx = gxw * inv_rms[:, None] - x * (inv_rms**3 * dot / d)[:, None]
    gw = np.sum(gy * x * inv_rms[:, None], axis=0)
    return gx.astype(x.dtype, copy=False), gw.astype(x.dtype, copy=False)


def softmax_fwd(x):
    # x: (n, d) -> rows sum to 1
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return (e / np.sum(e, axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_bwd(y, gy):
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return (y * (gy - dot)).astype(y.dtype, copy=False)


def causal_softmax_fwd(x, offset):
    # x: (b, q, k); row i may attend to columns j <= offset + i
    b, q, k = x.shape
    cols = np.arange(k)[None, :]
    rows = np.arange(q)[:, None]
    mask = cols > (rows + offset)
    xm = np.where(mask[None, :, :], -np.inf, x)
    m = np.max(xm, axis=2, keepdims=True)
    e = np.exp(xm - m)
    e = np.where(mask[None, :, :], 0.0, e)
    return (e / np.sum(e, axis=2, keepdims=True)).astype(x.dtype, copy=False)


def causal_softmax_bwd(y, gy):
    # masked entries have y == 0, so the usual formula already zeroes them
    dot = np.sum(y * gy, axis=2, keepdims=True)
    return (y * (gy - dot)).astype(y.dtype, copy=False)


def cross_entropy_fwd(logits, targets):
    # logits: (n, v), targets: (n,) int -> (mean nll, probs)
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    nll = lse - logits[np.arange(logits.shape[0]), targets]
    return float(np.mean(nll)), probs.astype(logits.dtype, copy=False)


def cross_entropy_bwd(probs, targets, gloss):
    n = probs.shape[0]
    g = probs * (gloss / n)
    g[np.arange(n), targets] -= gloss / n
    return g.astype(probs.dtype, copy=False)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
