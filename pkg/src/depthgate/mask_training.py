"""Trains a block mask for one input cluster against a frozen model.

Each step samples one stochastic soft mask, applies it as branch-output
scaling in the model's autodiff path, and minimizes language-model loss plus
a Lagrangian sparsity penalty. The gate locations descend by plain SGD while
the two multipliers ascend on the sparsity residual, the usual adversarial
construction that makes the expected zero-fraction track the target. Model
weights are never touched; callers can verify that with the weight
fingerprint.
"""
import csv
from dataclasses import dataclass

import numpy as np

from depthgate.errors import ConfigError, ContractError, TrainingDivergedError
from depthgate.gates import GateParams, MaskCandidate, sample_soft_mask
from depthgate.model import mask_length
from depthgate.tensor import Tensor

# Keeps log_alpha out of the saturated tails where sigmoid gradients vanish
# and a closed gate could never reopen within a training run.
LOG_ALPHA_CLAMP = 4.0


@dataclass
class SparsityController:
    """Target sparsity plus the two learned multipliers enforcing it."""
    s_target: float
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.s_target < 1.0:
            raise ConfigError("s_target must lie in [0, 1), got %g"
                              % self.s_target)
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ConfigError("lambda values must be finite")


@dataclass
class TrainingConfig:
    batch_size: int = 32
    gate_lr: float = 0.1
    lagrangian_lr: float = 0.1
    max_steps: int = 2000
    train_seq_len: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "gate_lr", "lagrangian_lr", "max_steps",
                     "train_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def lagrangian_penalty(t, ctrl):
    """lambda1*(t - s_target) + lambda2*(t - s_target)^2.

    Accepts a scalar tensor (returns one on the tape) or a plain float.
    """
    if isinstance(t, Tensor):
        d = t - ctrl.s_target
        return ctrl.lambda1 * d + ctrl.lambda2 * (d * d)
    d = float(t) - ctrl.s_target
    return ctrl.lambda1 * d + ctrl.lambda2 * d * d


def cluster_rng(seed, cluster_id):
    """Independent stream per (run seed, cluster); deterministic."""
    return np.random.default_rng(np.random.SeedSequence([seed, cluster_id]))


def _token_stream(cluster_data):
    parts = [np.asarray(doc, dtype=np.int64).reshape(-1)
             for doc in cluster_data]
    parts = [p for p in parts if p.size]
    if not parts:
        raise ConfigError("cluster data is empty")
    stream = np.concatenate(parts)
    if stream.size < 2:
        raise ConfigError("cluster data has fewer than 2 tokens")
    return stream


def _sample_batch(stream, rng, batch_size, seq_len):
    # Random windows with replacement; rows carry seq_len + 1 tokens so the
    # model can shift targets internally.
    eff = min(seq_len, stream.size - 1)
    starts = rng.integers(0, stream.size - eff, size=batch_size)
    return np.stack([stream[s:s + eff + 1] for s in starts])


def train_cluster_mask(model, cluster_data, cfg, ctrl, granularity=None,
                       cluster_id=0, centroid=None, log_path=None):
    """Optimize one cluster's gates; returns the binarized MaskCandidate.

    Mutates `ctrl` (multiplier ascent) and reads `model` without writing;
    raises if any model parameter is still trainable.
    """
    if any(p.requires_grad for p in model.parameters()):
        raise ContractError("model weights must be frozen for mask training")
    num_gates = mask_length(model.config, granularity)
    stream = _token_stream(cluster_data)
    rng = cluster_rng(cfg.seed, cluster_id)
    gate = GateParams.create(num_gates)
    rows = []

    for step in range(cfg.max_steps):
        batch = _sample_batch(stream, rng, cfg.batch_size, cfg.train_seq_len)
        z = sample_soft_mask(gate, rng)
        lm_loss, _ = model.forward_train(batch, soft_mask=z,
                                         granularity=granularity)
        t = gate.expected_sparsity_t()
        penalty = lagrangian_penalty(t, ctrl)
        total = lm_loss + penalty
        if not np.isfinite(total.item()):
            raise TrainingDivergedError(
                "non-finite objective at step %d: lm_loss=%g penalty=%g "
                "lambda1=%g lambda2=%g" % (step, lm_loss.item(),
                                           penalty.item(), ctrl.lambda1,
                                           ctrl.lambda2))
        rows.append((step, lm_loss.item(), penalty.item(), t.item(),
                     ctrl.lambda1, ctrl.lambda2))
        total.backward()

        la = gate.log_alpha
        la.data -= np.float32(cfg.gate_lr) * la.grad
        np.clip(la.data, -LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP, out=la.data)
        la.grad = None

        resid = rows[-1][3] - ctrl.s_target
        ctrl.lambda1 += cfg.lagrangian_lr * resid
        ctrl.lambda2 += cfg.lagrangian_lr * resid * resid

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lm_loss", "penalty",
                             "expected_sparsity", "lambda1", "lambda2"])
            writer.writerows(rows)

    binary = gate.binarize(ctrl.s_target)
    return MaskCandidate(
        cluster_id=cluster_id,
        centroid=np.zeros(0, dtype=np.float32) if centroid is None else centroid,
        log_alpha=gate.log_alpha.data.copy(),
        binary_mask=binary)
