"""Depth pruning lab for small decoder-only transformers.

Trains per-cluster binary block masks (attention and feed-forward branches
gated independently) with a stochastic relaxation, routes inputs to masks by
embedding similarity at inference, and compares against static depth-pruning
baselines under a shared FLOPs accounting.
"""
__version__ = "0.1.0"
