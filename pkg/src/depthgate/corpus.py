"""Synthetic multi-domain text corpora and corpus loaders.

Each domain draws words from its own character set with its own first-order
transition matrix, so domains differ in exactly the n-gram statistics the
built-in encoder measures. Generation is keyed by (seed, domain, doc), so
any document can be regenerated independently and the corpus is
byte-identical under the same spec.
"""
import os

import numpy as np

from .errors import ConfigError

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
DOMAIN_CHARS = 6
WORD_LEN_RANGE = (2, 7)


def domain_charset(domain):
    """Six characters per domain, disjoint for the first six domains."""
    start = (domain * DOMAIN_CHARS) % len(ALPHABET)
    doubled = ALPHABET + ALPHABET
    return doubled[start:start + DOMAIN_CHARS]


def _transition_matrix(domain, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain, 0xA]))
    m = rng.random((DOMAIN_CHARS, DOMAIN_CHARS)) ** 2 + 0.02
    return m / m.sum(axis=1, keepdims=True)


def make_document(domain, doc_index, doc_len, seed):
    """One domain document of exactly `doc_len` characters."""
    chars = domain_charset(domain)
    trans = _transition_matrix(domain, seed)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, domain, doc_index]))
    pieces = []
    total = 0
    while total < doc_len:
        n = int(rng.integers(*WORD_LEN_RANGE))
        idx = int(rng.integers(DOMAIN_CHARS))
        word = [chars[idx]]
        for _ in range(n - 1):
            idx = int(rng.choice(DOMAIN_CHARS, p=trans[idx]))
            word.append(chars[idx])
        pieces.append("".join(word))
        total += n + 1
    return " ".join(pieces)[:doc_len]


def make_synthetic_corpus(out_dir, num_domains, docs_per_domain, doc_len,
                          seed):
    """Write one blank-line-separated file per domain; returns the paths."""
    if num_domains < 1:
        raise ConfigError("num_domains must be >= 1, got %d" % num_domains)
    if docs_per_domain < 1 or doc_len < 8:
        raise ConfigError("need docs_per_domain >= 1 and doc_len >= 8")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for d in range(num_domains):
        docs = [make_document(d, j, doc_len, seed)
                for j in range(docs_per_domain)]
        path = os.path.join(out_dir, "domain%02d.txt" % d)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n\n".join(docs) + "\n")
        paths.append(path)
    return paths


def load_corpus_file(path):
    """Blank-line-separated documents from one UTF-8 file."""
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    docs = [d.strip() for d in raw.split("\n\n")]
    return [d for d in docs if d]


def load_corpus(path):
    """Documents from a file, or from every *.txt file of a directory."""
    if os.path.isdir(path):
        docs = []
        for name in sorted(os.listdir(path)):
            if name.endswith(".txt"):
                docs.extend(load_corpus_file(os.path.join(path, name)))
        if not docs:
            raise ConfigError("no documents under %s" % path)
        return docs
    if os.path.isfile(path):
        docs = load_corpus_file(path)
        if not docs:
            raise ConfigError("no documents in %s" % path)
        return docs
    raise ConfigError("corpus path %s does not exist" % path)


def load_corpus_labeled(dir_path):
    """(documents, source file index per document) for a corpus directory."""
    if not os.path.isdir(dir_path):
        raise ConfigError("%s is not a directory" % dir_path)
    docs, labels = [], []
    names = [n for n in sorted(os.listdir(dir_path)) if n.endswith(".txt")]
    if not names:
        raise ConfigError("no *.txt files under %s" % dir_path)
    for i, name in enumerate(names):
        for doc in load_corpus_file(os.path.join(dir_path, name)):
            docs.append(doc)
            labels.append(i)
    return docs, np.array(labels, dtype=np.int64)
