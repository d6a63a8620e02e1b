"""Text embeddings for routing and clustering.

Two interchangeable encoders produce unit-norm vectors: a self-contained
hashed character n-gram TF-IDF encoder, and a loader for embedding files
precomputed elsewhere. Both are pure functions of their input after
construction, so routing decisions are reproducible across runs.
"""
import math
import zlib

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_DIM = 64
NGRAM_SIZES = (2, 3, 4)
TRUNCATE_BYTES = 4096
HASHED_KIND = "hashed-ngram-tfidf"
EXTERNAL_KIND = "external-file"


def _to_text(text):
    """Normalize input to str, truncated to the first TRUNCATE_BYTES bytes."""
    if isinstance(text, str):
        raw = text.encode("utf-8")
    elif isinstance(text, (bytes, bytearray)):
        raw = bytes(text)
    else:
        raise ContractError("text must be str or bytes, got %s"
                            % type(text).__name__)
    if not raw:
        raise ContractError("cannot encode empty text")
    return raw[:TRUNCATE_BYTES].decode("utf-8", errors="replace")


def _normalize(vec):
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not math.isfinite(norm):
        raise ContractError("embedding has no direction (zero or non-finite)")
    return vec / norm


class HashedNgramEncoder:
    """Signed-hash character n-grams with optional TF-IDF weighting.

    Each n-gram is hashed with crc32 into one of `dim` buckets and adds
    +1 or -1 (sign from an independent hash bit) to that bucket, which
    keeps collisions unbiased. `fit` learns per-bucket inverse document
    frequencies; until then all buckets weigh equally.
    """

    kind = HASHED_KIND

    def __init__(self, dim=DEFAULT_DIM, ngram_sizes=NGRAM_SIZES, hash_seed=0,
                 idf=None):
        if dim < 1:
            raise ConfigError("encoder dim must be >= 1, got %d" % dim)
        sizes = tuple(int(n) for n in ngram_sizes)
        if not sizes or any(n < 1 for n in sizes):
            raise ConfigError("ngram_sizes must be positive, got %r"
                              % (ngram_sizes,))
        self.dim = int(dim)
        self.ngram_sizes = sizes
        self.hash_seed = int(hash_seed)
        if idf is not None:
            idf = np.asarray(idf, dtype=np.float64)
            if idf.shape != (self.dim,):
                raise ConfigError("idf must have shape (%d,), got %s"
                                  % (self.dim, idf.shape))
        self.idf = idf

    def _bucket_counts(self, text):
        """Signed term-frequency vector before any weighting."""
        chars = _to_text(text)
        counts = np.zeros(self.dim, dtype=np.float64)
        for n in self.ngram_sizes:
            for i in range(len(chars) - n + 1):
                h = zlib.crc32(chars[i:i + n].encode("utf-8"), self.hash_seed)
                sign = 1.0 if (h >> 16) & 1 == 0 else -1.0
                counts[h % self.dim] += sign
        return counts

    def fit(self, corpus):
        """Learn smoothed bucket IDF weights from an iterable of documents."""
        df = np.zeros(self.dim, dtype=np.float64)
        num_docs = 0
        for doc in corpus:
            df += self._bucket_counts(doc) != 0.0
            num_docs += 1
        if num_docs == 0:
            raise ConfigError("cannot fit encoder on an empty corpus")
        self.idf = np.log((1.0 + num_docs) / (1.0 + df)) + 1.0
        return self

    def encode(self, text):
        counts = self._bucket_counts(text)
        if not counts.any():
            raise ContractError(
                "text yields no character n-grams (shorter than %d chars "
                "or fully sign-cancelled)" % min(self.ngram_sizes))
        if self.idf is not None:
            counts = counts * self.idf
        return _normalize(counts)

    def to_config(self):
        cfg = {"kind": self.kind, "dim": self.dim,
               "ngram_sizes": list(self.ngram_sizes),
               "hash_seed": self.hash_seed}
        if self.idf is not None:
            cfg["idf"] = [float(v) for v in self.idf]
        return cfg

    @classmethod
    def from_config(cls, cfg):
        return cls(dim=cfg["dim"], ngram_sizes=cfg["ngram_sizes"],
                   hash_seed=cfg["hash_seed"], idf=cfg.get("idf"))


class ExternalFileEncoder:
    """Embedding lookup table read from a whitespace-separated text file.

    File layout: a header line `dim=<d> count=<M>`, then M records of
    `item-id v1 ... vd`. Vectors are L2-normalized on load so the unit-norm
    output contract holds regardless of how they were produced.
    """

    kind = EXTERNAL_KIND

    def __init__(self, path):
        self.path = str(path)
        with open(self.path, encoding="utf-8") as fh:
            header = fh.readline().strip().split()
            try:
                fields = dict(part.split("=", 1) for part in header)
                self.dim = int(fields["dim"])
                count = int(fields["count"])
            except (ValueError, KeyError):
                raise ContractError(
                    "bad embedding file header %r; expected "
                    "'dim=<d> count=<M>'" % " ".join(header))
            self._table = {}
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != self.dim + 1:
                    raise ContractError(
                        "line %d of %s has %d values, expected %d"
                        % (lineno, self.path, len(parts) - 1, self.dim))
                try:
                    vec = np.array([float(v) for v in parts[1:]],
                                   dtype=np.float64)
                except ValueError:
                    raise ContractError("line %d of %s has a non-numeric "
                                        "value" % (lineno, self.path))
                self._table[parts[0]] = _normalize(vec)
        if len(self._table) != count:
            raise ContractError(
                "embedding file %s declares count=%d but holds %d records"
                % (self.path, count, len(self._table)))

    def encode(self, item_id):
        if isinstance(item_id, (bytes, bytearray)):
            item_id = item_id.decode("utf-8", errors="replace")
        if not item_id:
            raise ContractError("cannot encode empty text")
        if item_id not in self._table:
            raise KeyError("no embedding on file for item %r" % item_id)
        return self._table[item_id].copy()

    def to_config(self):
        return {"kind": self.kind, "dim": self.dim, "path": self.path}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["path"])


def build_encoder(cfg):
    """Instantiate an encoder from its serialized config dict."""
    kind = cfg.get("kind")
    if kind == HASHED_KIND:
        return HashedNgramEncoder.from_config(cfg)
    if kind == EXTERNAL_KIND:
        return ExternalFileEncoder.from_config(cfg)
    raise ConfigError("unknown encoder kind %r" % kind)
