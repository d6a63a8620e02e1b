"""Mask library persistence, input routing, and masked evaluation.

A MaskLibrary couples trained mask candidates to the exact model weights
they were trained against (by fingerprint) and to the encoder that
produced the cluster centroids. Routing encodes an input once, picks the
nearest centroid, and runs the model under that candidate's binary mask.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer
from .encoder import build_encoder
from .errors import CompatibilityError, ConfigError
from .flops import masked_flops
from .gates import MaskCandidate
from .model import GRANULARITIES

LIBRARY_VERSION = 1


def _sig9(x):
    """Round to 9 significant decimal digits (exact for float32 values)."""
    return float("%.9g" % float(x))


def _sig9_tree(obj):
    if isinstance(obj, float):
        return _sig9(obj)
    if isinstance(obj, dict):
        return {k: _sig9_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sig9_tree(v) for v in obj]
    return obj


@dataclass
class MaskLibrary:
    model_fingerprint: str
    encoder: dict
    granularity: str
    target_sparsity: float
    candidates: list
    metadata: dict = field(default_factory=dict)
    version: int = LIBRARY_VERSION

    def __post_init__(self):
        if self.version != LIBRARY_VERSION:
            raise ConfigError("unsupported library version %r" % self.version)
        if self.granularity not in GRANULARITIES:
            raise ConfigError("unknown granularity %r" % self.granularity)
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError("target_sparsity must lie in [0, 1), got %g"
                              % self.target_sparsity)
        if not self.candidates:
            raise ConfigError("library holds no mask candidates")
        b = self.candidates[0].binary_mask.size
        want_zeros = int(np.floor(self.target_sparsity * b + 0.5))
        dim = self.encoder.get("dim")
        for cand in self.candidates:
            if cand.binary_mask.size != b:
                raise ConfigError("candidates disagree on mask length")
            zeros = int(np.sum(cand.binary_mask == 0))
            if zeros != want_zeros:
                raise ConfigError(
                    "candidate %d has %d zeros; target %g over %d blocks "
                    "requires %d" % (cand.cluster_id, zeros,
                                     self.target_sparsity, b, want_zeros))
            if dim is not None and cand.centroid.size != dim:
                raise ConfigError("candidate %d centroid has dim %d, encoder "
                                  "dim is %d" % (cand.cluster_id,
                                                 cand.centroid.size, dim))

    @property
    def num_blocks(self):
        return self.candidates[0].binary_mask.size

    def centroid_matrix(self):
        return np.stack([c.centroid.astype(np.float64)
                         for c in self.candidates])

    def to_json_obj(self):
        # Field order is part of the file format; do not reorder.
        obj = {"version": self.version,
               "model_fingerprint": self.model_fingerprint,
               "encoder": _sig9_tree(self.encoder),
               "granularity": self.granularity,
               "target_sparsity": _sig9(self.target_sparsity),
               "clusters": [
                   {"id": int(c.cluster_id),
                    "centroid": [_sig9(v) for v in c.centroid],
                    "log_alpha": [_sig9(v) for v in c.log_alpha],
                    "binary_mask": [int(v) for v in c.binary_mask]}
                   for c in self.candidates]}
        if self.metadata:
            obj["metadata"] = _sig9_tree(self.metadata)
        return obj

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        missing = [k for k in ("version", "model_fingerprint", "encoder",
                               "granularity", "target_sparsity", "clusters")
                   if k not in obj]
        if missing:
            raise ConfigError("library file %s lacks fields %s"
                              % (path, ", ".join(missing)))
        cands = [MaskCandidate(cluster_id=rec["id"],
                               centroid=np.array(rec["centroid"],
                                                 dtype=np.float32),
                               log_alpha=np.array(rec["log_alpha"],
                                                  dtype=np.float32),
                               binary_mask=np.array(rec["binary_mask"],
                                                    dtype=np.int8))
                 for rec in obj["clusters"]]
        return cls(version=obj["version"],
                   model_fingerprint=obj["model_fingerprint"],
                   encoder=obj["encoder"],
                   granularity=obj["granularity"],
                   target_sparsity=obj["target_sparsity"],
                   candidates=cands,
                   metadata=obj.get("metadata", {}))


def nearest_cluster(e, centroids):
    """(index, squared distance) of the closest centroid; ties → lowest."""
    d2 = np.sum((np.asarray(centroids, dtype=np.float64) - e) ** 2, axis=1)
    k = int(d2.argmin())
    return k, float(d2[k])


def check_fingerprint(lib, model):
    got = model.fingerprint()
    if got != lib.model_fingerprint:
        raise CompatibilityError(
            "mask library was trained against model %s... but this model is "
            "%s...; masks are meaningless across different weights"
            % (lib.model_fingerprint[:12], got[:12]))


def route(lib, text, model=None):
    """Select (cluster index, binary mask) for one input text.

    Pure function of the library and the input bytes. When `model` is
    given, its fingerprint is checked against the library first.
    """
    if model is not None:
        check_fingerprint(lib, model)
    enc = build_encoder(lib.encoder)
    e = enc.encode(text)
    k, _ = nearest_cluster(e, lib.centroid_matrix())
    return k, lib.candidates[k].binary_mask.copy()


def routed_generate(lib, model, prompt_text, steps):
    """Route once for the whole sequence, then generate greedily.

    Returns (token ids including the prompt, route report).
    """
    check_fingerprint(lib, model)
    enc = build_encoder(lib.encoder)
    e = enc.encode(prompt_text)
    k, dist = nearest_cluster(e, lib.centroid_matrix())
    mask = lib.candidates[k].binary_mask
    prompt_ids = tokenizer.encode(prompt_text, add_bos=True)
    out = model.generate(prompt_ids, mask=mask, steps=steps,
                         granularity=lib.granularity)
    flops = masked_flops(model.config, len(out), mask,
                         granularity=lib.granularity)
    report = {"cluster": k,
              "distance": dist,
              "mask": [int(v) for v in mask],
              "flops_percentage": flops.percentage}
    return out, report


def evaluate_masked_ppl(model, mask, eval_data, granularity=None,
                        batch_rows=32):
    """exp(mean token NLL) over the documents under a binary mask.

    Documents shorter than two tokens carry no scored positions and are
    skipped. Evaluation batches padded rows through the block-skipping
    eval path, which is numerically identical to incremental decoding.
    """
    docs = [np.asarray(d, dtype=np.int64).reshape(-1) for d in eval_data]
    docs = [d for d in docs if d.size >= 2]
    if not docs:
        raise ConfigError("no evaluable documents (need >= 2 tokens each)")
    total_nll, total_count = nll_sums(model, mask, docs, granularity,
                                      batch_rows)
    return float(np.exp(total_nll / total_count))


def nll_sums(model, mask, docs, granularity=None, batch_rows=32):
    """(sum of per-token NLL, token count) over already-filtered docs.

    Documents longer than the model context are split into independent
    max_seq_len chunks; the context resets at each boundary.
    """
    limit = model.config.max_seq_len
    chunked = []
    for d in docs:
        for start in range(0, d.size, limit):
            piece = d[start:start + limit]
            if piece.size >= 2:
                chunked.append(piece)
    docs = chunked
    order = sorted(range(len(docs)), key=lambda i: docs[i].size)
    total_nll = 0.0
    total_count = 0
    for start in range(0, len(order), batch_rows):
        chunk = [docs[i] for i in order[start:start + batch_rows]]
        width = max(d.size for d in chunk)
        batch = np.zeros((len(chunk), width), dtype=np.int64)
        for r, d in enumerate(chunk):
            batch[r, :d.size] = d
        nll = model.eval_nll(batch, mask=mask, granularity=granularity)
        for r, d in enumerate(chunk):
            total_nll += float(nll[r, :d.size - 1].sum())
            total_count += d.size - 1
    return total_nll, total_count
