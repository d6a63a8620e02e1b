"""Timing comparison between the compiled kernels and the NumPy fallback.

Runs each kernel on desk-scale shapes with both implementations, checks
they agree, and prints per-kernel timings with the speedup factor.

    python benchmarks/bench_kernels.py [--repeats 30] [--rows 2048]
"""
import argparse
import time

import numpy as np

from depthgate.backend import np_kernels

try:
    from depthgate.backend import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x, dtype=np.float64)
                                   - np.asarray(y, dtype=np.float64))))
               for x, y in zip(a, b))


def cases(rows, dim, heads, seq, vocab, rng):
    x2 = rng.standard_normal((rows, dim)).astype(np.float32)
    w = rng.standard_normal(dim).astype(np.float32)
    gy2 = rng.standard_normal((rows, dim)).astype(np.float32)
    inv = (1.0 / np.sqrt(np.mean(x2.astype(np.float64) ** 2, axis=-1)
                         + 1e-5)).astype(np.float32)
    sm_y = np_kernels.softmax_fwd(x2)
    scores = rng.standard_normal((heads, seq, seq)).astype(np.float32)
    cs_y = np_kernels.causal_softmax_fwd(scores, 0)
    gy3 = rng.standard_normal(scores.shape).astype(np.float32)
    logits = rng.standard_normal((rows, vocab)).astype(np.float32)
    targets = rng.integers(0, vocab, size=rows)
    probs = np_kernels.softmax_fwd(logits)
    flat = rng.standard_normal(rows * dim).astype(np.float32)
    return [
        ("rmsnorm_fwd", lambda k: k.rmsnorm_fwd(x2, w, 1e-5)),
        ("rmsnorm_bwd", lambda k: k.rmsnorm_bwd(x2, w, inv, gy2)),
        ("softmax_fwd", lambda k: k.softmax_fwd(x2)),
        ("softmax_bwd", lambda k: k.softmax_bwd(sm_y, gy2)),
        ("causal_softmax_fwd", lambda k: k.causal_softmax_fwd(scores, 0)),
        ("causal_softmax_bwd", lambda k: k.causal_softmax_bwd(cs_y, gy3)),
        ("cross_entropy_fwd", lambda k: k.cross_entropy_fwd(logits, targets)),
        ("cross_entropy_bwd",
         lambda k: k.cross_entropy_bwd(probs, targets, 1.0)),
        ("sigmoid_fwd", lambda k: k.sigmoid_fwd(flat)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--seq", type=int, default=256)
    ap.add_argument("--vocab", type=int, default=258)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _ckernels is None:
        print("compiled extension not available; nothing to compare")
        return 1

    rng = np.random.default_rng(args.seed)
    print("%-20s %12s %12s %9s %12s"
          % ("kernel", "numpy (ms)", "cython (ms)", "speedup", "max |diff|"))
    for name, call in cases(args.rows, args.dim, args.heads, args.seq,
                            args.vocab, rng):
        diff = max_diff(call(np_kernels), call(_ckernels))
        t_np = timeit(lambda: call(np_kernels), args.repeats)
        t_cy = timeit(lambda: call(_ckernels), args.repeats)
        print("%-20s %12.3f %12.3f %8.2fx %12.3g"
              % (name, t_np * 1e3, t_cy * 1e3, t_np / t_cy, diff))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
