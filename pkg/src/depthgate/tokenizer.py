"""Byte-level tokenizer.

Token ids 0..255 are raw UTF-8 bytes; 256 and 257 are the begin and end
markers. There is no merge table, so encoding is reversible and the vocab
is fixed at 258.
"""
import numpy as np

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


def encode(text, add_bos=False, add_eos=False):
    """UTF-8 bytes of `text` as an int64 id array, with optional markers."""
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids.insert(0, BOS_ID)
    if add_eos:
        ids.append(EOS_ID)
    return np.array(ids, dtype=np.int64)


def decode(ids):
    """Inverse of encode; marker ids are dropped, bad bytes replaced."""
    data = bytes(int(i) for i in np.asarray(ids).reshape(-1) if int(i) < 256)
    return data.decode("utf-8", errors="replace")
