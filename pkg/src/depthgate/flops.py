"""Analytic forward-pass FLOP counts for dense and masked models.

Each matmul element costs 2 FLOPs (multiply + accumulate). Score matrices
are counted at full s-by-s size, matching the batched execution path.
Normalization, residual adds, activations, and rotary rotation are
excluded; on realistic shapes they are well under half a percent.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import branch_keep, mask_length

EXCLUDES_NOTE = ("norms, residual adds, activations, and rotary rotation "
                 "are not counted")

BREAKDOWN_KEYS = ("attention-linear", "attention-scores", "kv-projections",
                  "ffn", "lm-head", "embeddings")


@dataclass
class FlopsReport:
    seq_len: int
    dense_flops: int
    masked_flops: int
    percentage: float
    breakdown: dict = field(default_factory=dict)
    excludes: str = EXCLUDES_NOTE

    def __post_init__(self):
        if self.masked_flops > self.dense_flops:
            raise ConfigError("masked FLOPs exceed dense FLOPs")
        if not 0.0 < self.percentage <= 1.0:
            raise ConfigError("percentage must lie in (0, 1], got %g"
                              % self.percentage)


def _per_layer_entries(config, seq_len):
    s, d = seq_len, config.dim
    return {
        "attention-linear": 2 * 2 * s * d * d,
        "attention-scores": 2 * 2 * s * s * d,
        "kv-projections": 2 * 2 * s * d * config.kv_dim,
        "ffn": 2 * 3 * s * d * config.ffn_dim,
    }


def dense_flops(config, seq_len):
    """FLOPs of one unmasked forward pass over `seq_len` tokens."""
    return masked_flops(config, seq_len, None)


def masked_flops(config, seq_len, binary_mask, granularity=None):
    """FLOPs with skipped blocks removed.

    A skipped FFN costs nothing; a skipped attention block still pays for
    its key/value projections, which feed later layers through the cache.
    `binary_mask=None` means dense.
    """
    if seq_len < 1:
        raise ConfigError("seq_len must be >= 1, got %d" % seq_len)
    want = mask_length(config, granularity)
    if binary_mask is None:
        binary_mask = np.ones(want, dtype=np.int8)
    else:
        binary_mask = np.asarray(binary_mask)
        if binary_mask.shape != (want,):
            raise ConfigError(
                "mask has shape %s, expected (%d,)"
                % (binary_mask.shape, want))
    attn_keep, ffn_keep = branch_keep(binary_mask, config, granularity)

    per_layer = _per_layer_entries(config, seq_len)
    head = 2 * seq_len * config.dim * config.vocab_size
    layers = config.num_layers

    dense_break = {k: v * layers for k, v in per_layer.items()}
    dense_break["lm-head"] = head
    dense_break["embeddings"] = 0

    masked_break = dict(dense_break)
    removable_attn = per_layer["attention-linear"] + per_layer["attention-scores"]
    skipped_attn = int(np.sum(~attn_keep))
    skipped_ffn = int(np.sum(~ffn_keep))
    masked_break["attention-linear"] -= skipped_attn * per_layer["attention-linear"]
    masked_break["attention-scores"] -= skipped_attn * per_layer["attention-scores"]
    masked_break["ffn"] -= skipped_ffn * per_layer["ffn"]

    dense_total = sum(dense_break.values())
    masked_total = dense_total - skipped_attn * removable_attn \
        - skipped_ffn * per_layer["ffn"]
    assert masked_total == sum(masked_break.values())

    return FlopsReport(seq_len=seq_len,
                       dense_flops=dense_total,
                       masked_flops=masked_total,
                       percentage=masked_total / dense_total,
                       breakdown=masked_break)


def report_lines(report):
    """Human-readable table, one entry per line."""
    lines = ["seq_len %d" % report.seq_len,
             "dense_flops %d" % report.dense_flops,
             "masked_flops %d" % report.masked_flops,
             "percentage %.4f" % report.percentage]
    for key in BREAKDOWN_KEYS:
        lines.append("  %-18s %d" % (key, report.breakdown.get(key, 0)))
    lines.append("excluded: %s" % report.excludes)
    return lines
