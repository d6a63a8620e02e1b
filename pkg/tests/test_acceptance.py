"""Acceptance gate: twelve quantitative and behavioral criteria.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line per
criterion. The heavier end-to-end criteria share one pipeline run through a
module-scoped fixture; stated runtime budgets are asserted where they are
part of the criterion.
"""
import csv
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

import oracles
from depthgate import tokenizer
from depthgate.baselines import evopress_search
from depthgate.clustering import kmeans_fit
from depthgate.corpus import load_corpus, make_synthetic_corpus
from depthgate.encoder import HashedNgramEncoder
from depthgate.gates import GateParams, MaskCandidate, expected_sparsity, \
    sample_soft_mask
from depthgate.mask_training import (SparsityController, TrainingConfig,
                                     train_cluster_mask)
from depthgate.model import KVCache, ModelConfig, TransformerModel
from depthgate.pipeline import (BaseModelSpec, BaselineToggles,
                                ExperimentConfig, MaskTrainSpec, run_pipeline)
from depthgate.pretrain import PretrainConfig, pretrain
from depthgate.routing import MaskLibrary, evaluate_masked_ppl, route
from depthgate.tensor import Tensor, embedding, repeat_kv, rope


# ------------------------------------------------------------------ 1

def test_criterion_01_hard_concrete_fidelity():
    """Monte-Carlo zero fraction matches the closed form within 3 SE."""
    start = time.perf_counter()
    draws = 10 ** 6
    for la in (-2.0, 0.0, 2.0):
        gate = GateParams.create(draws, init_log_alpha=la)
        rng = np.random.default_rng(12345 + int(la))
        z = sample_soft_mask(gate, rng).data
        frac = float(np.mean(z == 0.0))
        p = expected_sparsity(np.array([la]))
        se = np.sqrt(p * (1.0 - p) / draws)
        assert abs(frac - p) <= 3.0 * se, \
            "log_alpha=%g: mc %.6f vs closed form %.6f" % (la, frac, p)
    assert abs(expected_sparsity(np.array([0.0])) - 0.0267) < 5e-4
    assert time.perf_counter() - start < 10.0


# ------------------------------------------------------------------ 2

def _fd_cases(rng):
    """(name, package graph, float64 reference, input arrays) per instance.

    Weight constants scalarize vector-valued ops so every output element
    influences the objective; integer inputs stay captured, not perturbed.
    """
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal(4)
    c = rng.standard_normal((3, 4))
    pos = rng.standard_normal((2, 5)) * 0.4 + 2.0      # bounded away from 0
    mid = rng.uniform(0.1, 0.9, size=(3, 4))           # away from clip kinks
    m1 = rng.standard_normal((3, 5))
    m2 = rng.standard_normal((5, 2))
    w = rng.standard_normal(4)
    sc = rng.standard_normal((2, 4, 4))
    cot = rng.standard_normal((2, 4, 4))
    logits = rng.standard_normal((6, 9))
    targets = rng.integers(0, 9, size=6)
    emb_w = rng.standard_normal((7, 4))
    toks = rng.integers(0, 7, size=(2, 3))
    xr = rng.standard_normal((1, 2, 5, 6))
    ang = np.arange(5, dtype=np.float64)[:, None] \
        * (1.0 / 10000.0 ** (np.arange(3) / 3.0))[None, :]
    cos32, sin32 = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    cr = rng.standard_normal(xr.shape)
    kv = rng.standard_normal((1, 2, 3, 4))
    ckv = rng.standard_normal((1, 4, 3, 4))

    return [
        ("add", lambda ta, tb: (ta + tb).sum(), lambda x, y: (x + y).sum(),
         [a, row]),
        ("mul", lambda ta, tb: (ta * tb).sum(), lambda x, y: (x * y).sum(),
         [a, b]),
        ("sub-neg", lambda ta, tb: (ta - (-tb)).mean(),
         lambda x, y: (x + y).mean(), [a, b]),
        ("exp", lambda ta: (ta.exp() * c).sum(),
         lambda x: (np.exp(x) * c).sum(), [a]),
        ("log", lambda ta: ta.log().sum(), lambda x: np.log(x).sum(), [pos]),
        ("sigmoid", lambda ta: (ta.sigmoid() * c).sum(),
         lambda x: (oracles.ref_sigmoid(x) * c).sum(), [a]),
        ("clip01", lambda ta: (ta.clip01() * c).sum(),
         lambda x: (np.clip(x, 0.0, 1.0) * c).sum(), [mid]),
        ("reshape-transpose",
         lambda ta: (ta.reshape(4, 3).transpose((1, 0)) * c).sum(),
         lambda x: (x.reshape(4, 3).T * c).sum(), [a]),
        ("select", lambda ta: ta.select(2), lambda x: x[2], [row]),
        ("sum", lambda ta: ta.sum(), lambda x: x.sum(), [a]),
        ("mean", lambda ta: ta.mean(), lambda x: x.mean(), [a]),
        ("matmul", lambda ta, tb: (ta @ tb).sum(),
         lambda x, y: (x @ y).sum(), [m1, m2]),
        ("rmsnorm", lambda ta, tw: (ta.rmsnorm(tw, eps=1e-5) * c).sum(),
         lambda x, v: (oracles.ref_rmsnorm(x, v, 1e-5) * c).sum(), [a, w]),
        ("softmax", lambda ta: (ta.softmax_lastdim() * c).sum(),
         lambda x: (oracles.ref_softmax(x) * c).sum(), [a]),
        ("causal-softmax",
         lambda ta: (ta.causal_softmax() * cot).sum(),
         lambda x: (oracles.ref_causal_softmax(x) * cot).sum(), [sc]),
        ("cross-entropy", lambda ta: ta.cross_entropy(targets),
         lambda x: oracles.ref_cross_entropy(x, targets), [logits]),
        ("embedding", lambda tw: embedding(tw, toks).sum(),
         lambda x: x[toks].sum(), [emb_w]),
        ("rope", lambda ta: (rope(ta, cos32, sin32) * cr).sum(),
         lambda x: (oracles.ref_rope(x, np.cos(ang), np.sin(ang)) * cr).sum(),
         [xr]),
        ("repeat-kv", lambda ta: (repeat_kv(ta, 2) * ckv).sum(),
         lambda x: (np.repeat(x, 2, axis=1) * ckv).sum(), [kv]),
    ]


def test_criterion_02_gradient_integrity():
    """Central finite differences agree with backprop on every op."""
    start = time.perf_counter()
    per_op = {}
    for instance in range(20):
        rng = np.random.default_rng(900 + instance)
        for name, pkg, ref, arrays in _fd_cases(rng):
            tensors = [Tensor(np.asarray(x, dtype=np.float32),
                              requires_grad=True) for x in arrays]
            out = pkg(*tensors)
            out.backward()
            for i, base in enumerate(arrays):
                def f(xi, i=i):
                    args = [np.asarray(x, dtype=np.float64) for x in arrays]
                    args[i] = xi
                    return float(ref(*args))
                want = oracles.fd_grad(f, np.asarray(base, dtype=np.float64),
                                       h=1e-3)
                err = oracles.rel_err(tensors[i].grad, want)
                assert err < 1e-4, "%s input %d instance %d: rel err %.3g" \
                    % (name, i, instance, err)
            per_op[name] = per_op.get(name, 0) + 1
    assert all(count == 20 for count in per_op.values())
    assert len(per_op) == 19
    assert time.perf_counter() - start < 60.0


# ------------------------------------------------------------------ 3, 4

CONV_CFG = ModelConfig(dim=16, num_layers=4, num_heads=2, num_kv_heads=1,
                       ffn_dim=32, max_seq_len=40)


def _frozen_model(seed=7):
    model = TransformerModel.from_random(CONV_CFG, seed=seed)
    model.freeze()
    return model


def test_criterion_03_sparsity_convergence(tmp_path):
    """Expected sparsity reaches 0.25 +/- 0.02 with exactly 2 binarized
    zeros, on 3/3 seeds."""
    start = time.perf_counter()
    model = _frozen_model()
    for seed in (0, 1, 2):
        docs = [np.random.default_rng(1000 + seed).integers(0, 258,
                                                            size=3000)]
        log = tmp_path / ("conv%d.csv" % seed)
        cand = train_cluster_mask(
            model, docs,
            TrainingConfig(batch_size=16, max_steps=2000, train_seq_len=32,
                           seed=seed),
            SparsityController(s_target=0.25), log_path=log)
        with open(log) as fh:
            rows = list(csv.DictReader(fh))
        t_end = float(rows[-1]["expected_sparsity"])
        assert abs(t_end - 0.25) <= 0.02, "seed %d: t=%.4f" % (seed, t_end)
        assert int(np.sum(cand.binary_mask == 0)) == 2, \
            "seed %d: %s" % (seed, cand.binary_mask)
    assert time.perf_counter() - start < 300.0


def test_criterion_04_frozen_weights_guarantee():
    model = _frozen_model(seed=9)
    before = model.fingerprint()
    docs = [np.random.default_rng(5).integers(0, 258, size=2000)]
    train_cluster_mask(model, docs,
                       TrainingConfig(batch_size=8, max_steps=120,
                                      train_seq_len=24, seed=0),
                       SparsityController(s_target=0.5))
    assert model.fingerprint() == before


# ------------------------------------------------------------------ 5

SKIP_CFG = ModelConfig(dim=32, num_layers=2, num_heads=2, num_kv_heads=1,
                       ffn_dim=64, max_seq_len=48)


def test_criterion_05_skip_path_equivalence():
    """Skip execution == mask-as-scaling within 1e-5; cached greedy decode
    matches full-prefix recomputation."""
    model = TransformerModel.from_random(SKIP_CFG, seed=3)
    model.freeze()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        seq = rng.integers(0, 258, size=int(rng.integers(4, 14)))
        mask = rng.integers(0, 2, size=4).astype(np.int8)
        _, logits = model.forward_train(
            seq[None, :], soft_mask=Tensor(mask.astype(np.float32)))
        cache = KVCache(SKIP_CFG)
        got = np.stack([model.forward_infer(tok, cache, mask)
                        for tok in seq[:-1]])
        worst = max(worst, float(np.max(np.abs(got - logits.data[0]))))
    assert worst <= 1e-5, "max |logit diff| %.3g" % worst

    for trial in range(20):
        prompt = rng.integers(0, 258, size=int(rng.integers(2, 6)))
        if trial % 2 == 0:
            mask = np.array([0, 1, 0, 1], dtype=np.int8)   # attention skips
        else:
            mask = np.ones(4, dtype=np.int8)
            mask[rng.choice(4, size=2, replace=False)] = 0
        fast = model.generate(prompt, mask, steps=8)
        slow = list(prompt)
        for _ in range(8):
            logits = model.logits_eval(np.array(slow)[None, :], mask)
            slow.append(int(np.argmax(logits[0, -1])))
        assert np.array_equal(fast, np.array(slow)), "trial %d" % trial


# ------------------------------------------------------------------ 6

def test_criterion_06_routing_correctness():
    enc = HashedNgramEncoder(dim=16)
    texts = ["alpha beta gamma", "0123 4567 89", "zzz yyy xxx", "cat sat mat"]
    model = TransformerModel.from_random(SKIP_CFG, seed=0)
    cands = [MaskCandidate(cluster_id=i, centroid=enc.encode(t),
                           log_alpha=np.zeros(4, dtype=np.float32),
                           binary_mask=np.array([1, 1, 1, 0], dtype=np.int8))
             for i, t in enumerate(texts)]
    lib = MaskLibrary(model_fingerprint=model.fingerprint(),
                      encoder=enc.to_config(), granularity="block",
                      target_sparsity=0.25, candidates=cands)
    for i, text in enumerate(texts):
        assert route(lib, text)[0] == i
    cents = lib.centroid_matrix()
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(4, 50))
        text = rng.integers(97, 123, size=n).astype(np.uint8).tobytes()
        k, _ = route(lib, text)
        assert k == int(np.argmin(np.sum((cents - enc.encode(text)) ** 2,
                                         axis=1)))
    dup = cands[0].centroid.copy()
    for cand in cands:
        cand.centroid = dup
    assert route(lib, texts[0])[0] == 0


# ------------------------------------------------------------------ 7

def test_criterion_07_clustering():
    rng = np.random.default_rng(4)
    cloud = rng.standard_normal((240, 6))
    cm = kmeans_fit(cloud, 5, seed=0)
    hist = np.asarray(cm.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * np.abs(hist[:-1]))
    offset = np.array([10.0, 0.0, 0.0])     # centers exactly 10 sigma apart
    for seed in range(20):
        r = np.random.default_rng(seed)
        pts = np.concatenate([r.normal(0.0, 1.0, size=(40, 3)),
                              r.normal(0.0, 1.0, size=(40, 3)) + offset])
        truth = np.repeat([0, 1], 40)
        got = kmeans_fit(pts, 2, seed=seed).assignments
        assert oracles.adjusted_rand_index(truth, got) == 1.0, \
            "seed %d" % seed


# ------------------------------------------------------------------ 8

def test_criterion_08_flops_anchor():
    from depthgate.flops import dense_flops, masked_flops
    start = time.perf_counter()
    llama = ModelConfig(dim=4096, num_layers=32, num_heads=32,
                        num_kv_heads=8, ffn_dim=14336, max_seq_len=8192,
                        vocab_size=128256)
    dense = dense_flops(llama, 2048)
    assert abs(dense.dense_flops - 32.94e12) / 32.94e12 <= 0.015
    mask = np.ones(64, dtype=np.int8)
    mask[0:32:2] = 0            # 16 attention blocks skipped
    pct = masked_flops(llama, 2048, mask).percentage
    assert 0.89 <= pct <= 0.91
    assert time.perf_counter() - start < 1.0


# ------------------------------------------------------- 9, 10 (shared run)

ACCEPT_MODEL = dict(dim=64, num_layers=4, num_heads=4, num_kv_heads=2,
                    ffn_dim=128, max_seq_len=512)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """4-domain corpus, N in {1, 4}, 25% sparsity, 3 seeds, SLEB baseline."""
    root = tmp_path_factory.mktemp("desk")
    make_synthetic_corpus(root / "corpus", 4, 50, 400, seed=0)
    cfg = ExperimentConfig(
        model=ModelConfig(**ACCEPT_MODEL),
        corpus_path=str(root / "corpus"), out_dir=str(root / "out"),
        cluster_counts=[1, 4], sparsities=[0.25], seeds=[0, 1, 2],
        base=BaseModelSpec(steps=600, batch_size=16, seq_len=64, seed=0),
        mask=MaskTrainSpec(steps=300, batch_size=8, seq_len=256),
        baselines=BaselineToggles(sleb=True), mc_num_tasks=64)
    start = time.perf_counter()
    report = run_pipeline(cfg)
    return cfg, report, time.perf_counter() - start


def test_criterion_09_dynamic_beats_static(desk_run):
    """Routed masks match or beat the static L0 mask and SLEB, 3-seed mean."""
    _, report, elapsed = desk_run
    routed = report.mean_ppl("routed", 4, 0.25)
    static = report.mean_ppl("routed", 1, 0.25)
    sleb = report.mean_ppl("sleb", 4, 0.25)
    assert routed <= static, "routed %.5f > static %.5f" % (routed, static)
    assert routed <= sleb, "routed %.5f > sleb %.5f" % (routed, sleb)
    assert elapsed < 1800.0


def test_criterion_10_cluster_count_trend(desk_run):
    cfg, report, _ = desk_run
    assert report.mean_ppl("routed", 4, 0.25) \
        <= report.mean_ppl("routed", 1, 0.25)
    summary = (Path(cfg.out_dir) / "summary.txt").read_text()
    assert "cluster-count sweep" in summary


# ------------------------------------------------------------------ 11

def test_criterion_11_baseline_sanity(tmp_path):
    """Evolutionary search recovers the exhaustive optimum over C(8,2)=28
    masks, with monotone best fitness."""
    cfg = ModelConfig(dim=48, num_layers=4, num_heads=4, num_kv_heads=2,
                      ffn_dim=96, max_seq_len=80)
    make_synthetic_corpus(tmp_path / "c", 2, 20, 300, seed=0)
    docs = load_corpus(tmp_path / "c")
    model = TransformerModel.from_random(cfg, seed=0)
    pretrain(model, docs, PretrainConfig(steps=200, batch_size=8, seq_len=48,
                                         seed=0))
    model.freeze()
    calib = [tokenizer.encode(d) for d in docs[:10]]
    best = np.inf
    for zeros in combinations(range(8), 2):
        mask = np.ones(8, dtype=np.int8)
        mask[list(zeros)] = 0
        best = min(best, evaluate_masked_ppl(model, mask, calib))
    result = evopress_search(model, calib, 0.25, generations=50,
                             population=8, seed=0)
    found = evaluate_masked_ppl(model, result.binary_mask, calib)
    assert found == pytest.approx(best, rel=1e-12), \
        "search %.6f vs exhaustive %.6f" % (found, best)
    trace = result.score_trace
    assert all(a >= b - 1e-12 for a, b in zip(trace, trace[1:]))


# ------------------------------------------------------------------ 12

def test_criterion_12_pipeline_determinism(tmp_path):
    """Identical config twice: byte-identical artifacts, reports included."""
    make_synthetic_corpus(tmp_path / "corpus", 2, 24, 300, seed=0)
    out = tmp_path / "out"
    cfg = ExperimentConfig(
        model=ModelConfig(dim=32, num_layers=2, num_heads=2, num_kv_heads=1,
                          ffn_dim=64, max_seq_len=64),
        corpus_path=str(tmp_path / "corpus"), out_dir=str(out),
        cluster_counts=[2], sparsities=[0.25], seeds=[0],
        base=BaseModelSpec(steps=30, batch_size=8, seq_len=48),
        mask=MaskTrainSpec(steps=25, batch_size=8, seq_len=48),
        baselines=BaselineToggles(evopress=True, evopress_generations=2,
                                  evopress_population=3), mc_num_tasks=8)
    run_pipeline(cfg)
    first = {str(p.relative_to(out)): p.read_bytes()
             for p in sorted(out.rglob("*")) if p.is_file()}
    run_pipeline(cfg)
    second = {str(p.relative_to(out)): p.read_bytes()
              for p in sorted(out.rglob("*")) if p.is_file()}
    assert set(first) == set(second)
    mismatched = [k for k in first if first[k] != second[k]]
    assert not mismatched, mismatched
