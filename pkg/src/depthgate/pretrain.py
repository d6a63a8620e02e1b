"""Next-token pretraining for the toy base model.

Adam on all weights over random windows of the tokenized corpus. The
result is a small but genuinely trained model: block contributions
differentiate, which is what both mask training and the static baselines
need to have something real to measure.
"""
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .errors import ConfigError, ContractError, TrainingDivergedError

ADAM_STREAM_TAG = 17   # distinguishes this rng stream from mask training


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_size", "seq_len", "lr", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name)
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")


def corpus_token_stream(docs):
    """Concatenated document tokens with EOS separators."""
    parts = []
    for doc in docs:
        ids = tokenizer.encode(doc)
        if ids.size:
            parts.append(ids)
            parts.append(np.array([tokenizer.EOS_ID], dtype=np.int64))
    if not parts:
        raise ConfigError("corpus contains no tokens")
    stream = np.concatenate(parts)
    if stream.size < 2:
        raise ConfigError("corpus has fewer than 2 tokens")
    return stream


def _adam_step(param, state, grad, cfg, t):
    m, v = state
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    param.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)


def pretrain(model, docs, cfg, log_path=None):
    """Train `model` in place on `docs`; returns the per-step loss list."""
    params = model.parameters()
    if not all(p.requires_grad for p in params):
        raise ContractError("model weights must be trainable for pretraining")
    stream = corpus_token_stream(docs)
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, ADAM_STREAM_TAG]))
    eff = min(cfg.seq_len, stream.size - 1)
    state = {name: (np.zeros_like(p.data, dtype=np.float64),
                    np.zeros_like(p.data, dtype=np.float64))
             for name, p in model.weights.items()}
    losses = []
    for step in range(cfg.steps):
        starts = rng.integers(0, stream.size - eff, size=cfg.batch_size)
        batch = np.stack([stream[s:s + eff + 1] for s in starts])
        loss, _ = model.forward_train(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError("non-finite loss at step %d" % step)
        losses.append(value)
        loss.backward()

        grads = {name: p.grad.astype(np.float64)
                 for name, p in model.weights.items()}
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, cfg.grad_clip / max(norm, 1e-12))
        for name, p in model.weights.items():
            _adam_step(p, state[name], grads[name] * scale, cfg, step + 1)
            p.grad = None

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step,loss\n")
            for i, value in enumerate(losses):
                fh.write("%d,%.6f\n" % (i, value))
    return losses
