"""Hashed n-gram and external-file encoders."""
import zlib

import numpy as np
import pytest

from depthgate.encoder import (DEFAULT_DIM, TRUNCATE_BYTES, ExternalFileEncoder,
                               HashedNgramEncoder, build_encoder)
from depthgate.errors import ConfigError, ContractError


def bucket(gram, dim=DEFAULT_DIM, seed=0):
    return zlib.crc32(gram.encode(), seed) % dim


def sign_of(gram, seed=0):
    return 1.0 if (zlib.crc32(gram.encode(), seed) >> 16) & 1 == 0 else -1.0


class TestHashedNgram:
    def test_deterministic(self):
        enc = HashedNgramEncoder()
        a = enc.encode("the quick brown fox")
        b = enc.encode("the quick brown fox")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        enc = HashedNgramEncoder()
        rng = np.random.default_rng(0)
        for _ in range(25):
            length = int(rng.integers(2, 400))
            text = bytes(rng.integers(32, 127, size=length))
            vec = enc.encode(text)
            assert vec.shape == (DEFAULT_DIM,)
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_ngrams_near_orthogonal(self):
        enc = HashedNgramEncoder()
        cos = float(enc.encode("aaaa") @ enc.encode("zzzz"))
        assert abs(cos) < 0.1

    def test_empty_text_rejected(self):
        enc = HashedNgramEncoder()
        with pytest.raises(ContractError, match="empty"):
            enc.encode("")
        with pytest.raises(ContractError, match="empty"):
            enc.encode(b"")

    def test_too_short_for_any_ngram(self):
        with pytest.raises(ContractError, match="n-grams"):
            HashedNgramEncoder().encode("x")

    def test_bytes_and_str_agree(self):
        enc = HashedNgramEncoder()
        assert np.array_equal(enc.encode("hello"), enc.encode(b"hello"))

    def test_truncates_to_4096_bytes(self):
        enc = HashedNgramEncoder()
        long = "ab" * 4000
        assert np.array_equal(enc.encode(long),
                              enc.encode(long[:TRUNCATE_BYTES]))
        # And the tail really is ignored.
        assert np.array_equal(enc.encode(long),
                              enc.encode(long[:TRUNCATE_BYTES] + "qzqzqz"))

    def test_single_bigram_lands_in_crc_bucket(self):
        # Two-char texts produce exactly one bigram and no longer grams, so
        # the embedding is a signed unit spike at the crc32 bucket.
        enc = HashedNgramEncoder()
        vec = enc.encode("ab")
        expect = np.zeros(DEFAULT_DIM)
        expect[bucket("ab")] = sign_of("ab")
        assert np.array_equal(vec, expect)

    def test_idf_matches_smoothed_formula(self):
        # Corpus of single-bigram docs with distinct buckets gives exact
        # document frequencies to check idf = log((1+M)/(1+df)) + 1 against.
        assert bucket("ab") != bucket("cd")
        enc = HashedNgramEncoder().fit(["ab", "ab", "cd"])
        assert enc.idf[bucket("ab")] == pytest.approx(np.log(4 / 3) + 1)
        assert enc.idf[bucket("cd")] == pytest.approx(np.log(4 / 2) + 1)
        untouched = bucket("zq")
        assert untouched not in (bucket("ab"), bucket("cd"))
        assert enc.idf[untouched] == pytest.approx(np.log(4.0) + 1)

    def test_fit_reweights_shared_features(self):
        # "ab" appears everywhere so idf should down-weight it relative to
        # the rarer "cd", pulling the encoding of "abcd"-ish text toward cd.
        docs = ["abxy", "abpq", "abrs", "abcd"]
        plain = HashedNgramEncoder()
        fitted = HashedNgramEncoder().fit(docs)
        v_plain = plain.encode("abcd")
        v_fit = fitted.encode("abcd")
        assert not np.allclose(v_plain, v_fit)
        assert abs(v_fit[bucket("cd")]) > abs(v_fit[bucket("ab")])

    def test_fit_empty_corpus_rejected(self):
        with pytest.raises(ConfigError, match="empty corpus"):
            HashedNgramEncoder().fit([])

    def test_custom_dim_and_seed(self):
        enc = HashedNgramEncoder(dim=16, hash_seed=7)
        vec = enc.encode("hello world")
        assert vec.shape == (16,)
        assert not np.array_equal(vec[:16],
                                  HashedNgramEncoder(dim=16).encode(
                                      "hello world"))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            HashedNgramEncoder(dim=0)
        with pytest.raises(ConfigError):
            HashedNgramEncoder(ngram_sizes=())
        with pytest.raises(ConfigError):
            HashedNgramEncoder(idf=np.ones(3))

    def test_config_round_trip(self):
        enc = HashedNgramEncoder(dim=32, hash_seed=5).fit(["abcd", "efgh"])
        clone = build_encoder(enc.to_config())
        assert np.array_equal(enc.encode("abcdef"), clone.encode("abcdef"))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError, match="unknown encoder kind"):
            build_encoder({"kind": "neural"})


def write_embedding_file(path, records, dim=None, count=None):
    dim = dim if dim is not None else len(next(iter(records.values())))
    count = count if count is not None else len(records)
    lines = ["dim=%d count=%d" % (dim, count)]
    for key, vec in records.items():
        lines.append(key + " " + " ".join("%r" % float(v) for v in vec))
    path.write_text("\n".join(lines) + "\n")


class TestExternalFile:
    RECORDS = {"doc-a": [3.0, 0.0, 0.0, 4.0],
               "doc-b": [0.0, 1.0, 0.0, 0.0],
               "doc-c": [1.0, 1.0, 1.0, 1.0]}

    def test_lookup_normalizes(self, tmp_path):
        f = tmp_path / "emb.txt"
        write_embedding_file(f, self.RECORDS)
        enc = ExternalFileEncoder(f)
        assert enc.dim == 4
        vec = enc.encode("doc-a")
        assert vec == pytest.approx([0.6, 0.0, 0.0, 0.8])
        assert np.linalg.norm(enc.encode("doc-c")) == pytest.approx(1.0)

    def test_missing_item_is_lookup_error(self, tmp_path):
        f = tmp_path / "emb.txt"
        write_embedding_file(f, self.RECORDS)
        with pytest.raises(KeyError, match="doc-z"):
            ExternalFileEncoder(f).encode("doc-z")

    def test_empty_key_rejected(self, tmp_path):
        f = tmp_path / "emb.txt"
        write_embedding_file(f, self.RECORDS)
        with pytest.raises(ContractError, match="empty"):
            ExternalFileEncoder(f).encode("")

    def test_bad_header(self, tmp_path):
        f = tmp_path / "emb.txt"
        f.write_text("dimension=4 n=3\n")
        with pytest.raises(ContractError, match="header"):
            ExternalFileEncoder(f)

    def test_wrong_value_count(self, tmp_path):
        f = tmp_path / "emb.txt"
        f.write_text("dim=4 count=1\ndoc-a 1.0 2.0\n")
        with pytest.raises(ContractError, match="line 2"):
            ExternalFileEncoder(f)

    def test_count_mismatch(self, tmp_path):
        f = tmp_path / "emb.txt"
        write_embedding_file(f, self.RECORDS, count=5)
        with pytest.raises(ContractError, match="count=5"):
            ExternalFileEncoder(f)

    def test_non_numeric_value(self, tmp_path):
        f = tmp_path / "emb.txt"
        f.write_text("dim=2 count=1\ndoc-a 1.0 oops\n")
        with pytest.raises(ContractError, match="non-numeric"):
            ExternalFileEncoder(f)

    def test_zero_vector_rejected(self, tmp_path):
        f = tmp_path / "emb.txt"
        f.write_text("dim=2 count=1\ndoc-a 0.0 0.0\n")
        with pytest.raises(ContractError, match="direction"):
            ExternalFileEncoder(f)

    def test_config_round_trip(self, tmp_path):
        f = tmp_path / "emb.txt"
        write_embedding_file(f, self.RECORDS)
        enc = ExternalFileEncoder(f)
        clone = build_encoder(enc.to_config())
        assert np.array_equal(enc.encode("doc-b"), clone.encode("doc-b"))
