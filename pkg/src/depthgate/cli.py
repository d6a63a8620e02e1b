"""Command-line front end for the experiment pipeline and its stages.

Each subcommand wraps one library entry point. Failures print a
stage-tagged diagnostic to stderr and exit nonzero; success exits 0.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tokenizer
from .corpus import load_corpus, make_synthetic_corpus
from .errors import StageError
from .flops import masked_flops, report_lines
from .model import TransformerModel, mask_length
from .pipeline import (_split_clusters, _stage, load_clusters,
                       load_experiment_config, load_gates, run_pipeline,
                       save_clusters, save_gates)
from .routing import MaskLibrary, evaluate_masked_ppl, nearest_cluster

__all__ = ["main"]


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="depthgate",
        description="input-aware dynamic depth pruning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True,
                           help="experiment config JSON")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed list")
            p.add_argument("--out", default=None,
                           help="override the output directory")
        return p

    p = cmd("gen-corpus", "write a deterministic synthetic corpus",
            needs_config=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--docs-per-domain", type=int, default=50)
    p.add_argument("--doc-len", type=int, default=400)

    cmd("train-base", "train the base model on the configured corpus")
    cmd("cluster", "embed the corpus and fit cluster centroids")

    p = cmd("train-masks", "train per-cluster gate parameters")
    p.add_argument("--sparsity", type=float, default=None)
    p = cmd("binarize", "turn trained gates into a binary mask library")
    p.add_argument("--sparsity", type=float, default=None)

    p = cmd("route", "route one input text through a mask library")
    p.add_argument("--text", required=True)
    p.add_argument("--library", default=None,
                   help="library JSON (default: the pipeline artifact)")

    p = cmd("eval", "routed perplexity of a mask library over the corpus")
    p.add_argument("--library", default=None)

    p = cmd("baseline", "run one static pruning baseline")
    p.add_argument("--method", choices=("sleb", "oneshot", "evopress"),
                   required=True)
    p.add_argument("--sparsity", type=float, default=None)

    p = cmd("flops", "analytic FLOPs for the configured model")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--mask", default=None,
                   help="comma-separated 0/1 block mask (default dense)")
    p.add_argument("--csv", default=None, help="also write the report as CSV")

    cmd("pipeline", "run the full experiment end to end")
    return parser


def _load_cfg(args):
    with _stage("config"):
        cfg = load_experiment_config(args.config)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seeds = [args.seed]
        return cfg


def _primary(cfg, args=None):
    """The (N, seed, sparsity) cell a single-stage command operates on."""
    sp = cfg.sparsities[0]
    if args is not None and getattr(args, "sparsity", None) is not None:
        sp = args.sparsity
    return cfg.cluster_counts[0], cfg.seeds[0], sp


def _artifact(cfg, pattern, *parts):
    return Path(cfg.out_dir) / (pattern % parts)


def _sp_tag(sp):
    return ("%g" % sp).replace(".", "p").replace("-", "m")


def _load_base(cfg):
    path = cfg.base.path or _artifact(cfg, "base_model.npz")
    if not Path(path).exists():
        raise StageError("base-model", "no checkpoint at %s; run train-base "
                                       "first" % path)
    model = TransformerModel.load_npz(path)
    model.freeze()
    return model


def _fit_encoder(cfg, docs):
    from .encoder import HashedNgramEncoder
    enc = HashedNgramEncoder(dim=cfg.encoder_dim)
    enc.fit(docs)
    return enc


def _default_library(cfg):
    n, seed, sp = _primary(cfg)
    return _artifact(cfg, "library_N%d_seed%d_s%s.json", n, seed, _sp_tag(sp))


def run_command(args):
    if args.command == "gen-corpus":
        with _stage("gen-corpus"):
            paths = make_synthetic_corpus(args.out, args.domains,
                                          args.docs_per_domain, args.doc_len,
                                          seed=args.seed)
        print("wrote %d domain files under %s" % (len(paths), args.out))
        return 0

    cfg = _load_cfg(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "pipeline":
        report = run_pipeline(cfg)
        print((out / "summary.txt").read_text(), end="")
        print("report rows: %d (see %s)" % (len(report.rows),
                                            out / "report.csv"))
        return 0

    if args.command == "train-base":
        with _stage("corpus"):
            docs = load_corpus(cfg.corpus_path)
        with _stage("base-model"):
            from .pipeline import prepare_base_model
            cfg.base.path = ""      # force training even if artifact exists
            prepare_base_model(cfg, docs, out)
        print("trained base model -> %s" % (out / "base_model.npz"))
        return 0

    if args.command == "cluster":
        n, seed, _ = _primary(cfg)
        with _stage("corpus"):
            docs = load_corpus(cfg.corpus_path)
        with _stage("encode"):
            enc = _fit_encoder(cfg, docs)
            emb = np.stack([enc.encode(d) for d in docs])
            with open(out / "encoder.json", "w", newline="\n") as fh:
                json.dump(enc.to_config(), fh, indent=2)
                fh.write("\n")
        with _stage("cluster"):
            from .clustering import kmeans_fit
            cm = kmeans_fit(emb, n, seed=seed)
            save_clusters(cm, out / ("clusters_N%d_seed%d.json" % (n, seed)))
        print("fit %d clusters (inertia %.6g) -> %s"
              % (n, cm.inertia, out / ("clusters_N%d_seed%d.json" % (n, seed))))
        return 0

    if args.command in ("train-masks", "binarize", "eval", "route",
                        "baseline"):
        return _run_model_command(args, cfg, out)

    if args.command == "flops":
        with _stage("flops"):
            seq_len = args.seq_len or cfg.model.max_seq_len
            mask = None
            if args.mask is not None:
                mask = np.array([int(v) for v in args.mask.split(",")],
                                dtype=np.int8)
            report = masked_flops(cfg.model, seq_len, mask, cfg.granularity)
            for line in report_lines(report):
                print(line)
            if args.csv:
                with open(args.csv, "w", newline="\n") as fh:
                    fh.write("key,flops\n")
                    fh.write("dense,%d\n" % report.dense_flops)
                    fh.write("masked,%d\n" % report.masked_flops)
                    for key, val in report.breakdown.items():
                        fh.write("%s,%d\n" % (key, val))
        return 0

    raise StageError("cli", "unknown command %r" % args.command)


def _run_model_command(args, cfg, out):
    n, seed, sp = _primary(cfg, args)
    tag = "N%d_seed%d" % (n, seed)
    stag = "%s_s%s" % (tag, _sp_tag(sp))

    if args.command == "route":
        with _stage("route"):
            from .routing import route
            lib_path = args.library or _default_library(cfg)
            lib = MaskLibrary.load(lib_path)
            k, mask = route(lib, args.text)
            from .encoder import build_encoder
            e = build_encoder(lib.encoder).encode(args.text)
            _, dist = nearest_cluster(e, lib.centroid_matrix())
            pct = masked_flops(cfg.model, cfg.model.max_seq_len, mask,
                               lib.granularity).percentage
            print(json.dumps({"cluster": k, "distance": dist,
                              "mask": [int(v) for v in mask],
                              "flops_percentage": pct}, sort_keys=True))
        return 0

    with _stage("corpus"):
        docs = load_corpus(cfg.corpus_path)
        doc_tokens = [tokenizer.encode(d) for d in docs]
    model = _load_base(cfg)

    if args.command == "train-masks":
        cluster_path = out / ("clusters_%s.json" % tag)
        if not cluster_path.exists():
            raise StageError("cluster", "no cluster artifact at %s; run "
                                        "cluster first" % cluster_path)
        cm = load_clusters(cluster_path)
        logs = out / "gate_logs"
        logs.mkdir(exist_ok=True)
        with _stage("train-masks"):
            train_ids, _ = _split_clusters(cm.assignments, n)
            calib = [[doc_tokens[i] for i in ids[:cfg.calib_per_cluster]]
                     for ids in train_ids]
            from .mask_training import SparsityController, TrainingConfig, \
                train_cluster_mask
            tcfg = TrainingConfig(batch_size=cfg.mask.batch_size,
                                  gate_lr=cfg.mask.gate_lr,
                                  lagrangian_lr=cfg.mask.lagrangian_lr,
                                  max_steps=cfg.mask.steps,
                                  train_seq_len=min(cfg.mask.seq_len,
                                                    cfg.model.max_seq_len),
                                  seed=seed)
            candidates = []
            for k in range(n):
                ctrl = SparsityController(s_target=sp)
                candidates.append(train_cluster_mask(
                    model, calib[k], tcfg, ctrl, granularity=cfg.granularity,
                    cluster_id=k,
                    centroid=cm.centroids[k].astype(np.float32),
                    log_path=logs / ("cluster%d_%s.csv" % (k, stag))))
            save_gates(candidates, cfg.granularity, sp,
                       out / ("gates_%s.json" % stag))
        print("trained %d cluster masks -> %s"
              % (n, out / ("gates_%s.json" % stag)))
        return 0

    if args.command == "binarize":
        gates_path = out / ("gates_%s.json" % stag)
        if not gates_path.exists():
            raise StageError("train-masks", "no gates artifact at %s; run "
                                            "train-masks first" % gates_path)
        with _stage("binarize"):
            candidates, granularity, target = load_gates(gates_path)
            enc = _fit_encoder(cfg, docs)
            lib = MaskLibrary(model_fingerprint=model.fingerprint(),
                              encoder=enc.to_config(), granularity=granularity,
                              target_sparsity=target, candidates=candidates)
            lib_path = out / ("library_%s.json" % stag)
            lib.save(lib_path)
        print("wrote mask library -> %s" % lib_path)
        return 0

    if args.command == "eval":
        with _stage("evaluate"):
            lib_path = args.library or _default_library(cfg)
            lib = MaskLibrary.load(lib_path)
            from .routing import check_fingerprint
            check_fingerprint(lib, model)
            from .encoder import build_encoder
            enc = build_encoder(lib.encoder)
            cents = lib.centroid_matrix()
            total_nll, total_tok = 0.0, 0
            from .routing import nll_sums
            by_cluster = {}
            for text, toks in zip(docs, doc_tokens):
                if toks.size < 2:
                    continue
                k, _ = nearest_cluster(enc.encode(text), cents)
                by_cluster.setdefault(k, []).append(toks)
            for k in sorted(by_cluster):
                nll, count = nll_sums(model, lib.candidates[k].binary_mask,
                                      by_cluster[k], lib.granularity)
                print("cluster %d: %d docs, %d tokens, ppl %.6g"
                      % (k, len(by_cluster[k]), count, np.exp(nll / count)))
                total_nll += nll
                total_tok += count
            print("overall ppl %.6g over %d tokens"
                  % (np.exp(total_nll / total_tok), total_tok))
        return 0

    if args.command == "baseline":
        with _stage("baseline"):
            from .baselines import (evopress_search, oneshot_importance_prune,
                                    sleb_prune, static_library)
            pool = [t for t in doc_tokens if t.size >= 2]
            pool = pool[:cfg.calib_per_cluster]
            b = mask_length(cfg.model, cfg.granularity)
            num_remove = int(np.floor(sp * b + 0.5))
            if args.method == "sleb":
                result = sleb_prune(model, pool, num_remove,
                                    granularity=cfg.granularity)
            elif args.method == "oneshot":
                result = oneshot_importance_prune(model, pool, num_remove,
                                                  granularity=cfg.granularity)
            else:
                result = evopress_search(
                    model, pool, sp,
                    generations=cfg.baselines.evopress_generations,
                    population=cfg.baselines.evopress_population,
                    seed=seed, granularity=cfg.granularity)
            enc = _fit_encoder(cfg, docs)
            lib = static_library(model, result, enc.to_config(),
                                 cfg.granularity, sp)
            lib_path = out / ("library_%s_%s.json" % (args.method, stag))
            lib.save(lib_path)
            ppl = evaluate_masked_ppl(model, result.binary_mask, pool,
                                      granularity=cfg.granularity)
            print("%s mask %s calib ppl %.6g -> %s"
                  % (args.method, [int(v) for v in result.binary_mask], ppl,
                     lib_path))
        return 0

    raise StageError("cli", "unknown command %r" % args.command)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return run_command(args)
    except StageError as exc:
        print("error %s" % exc, file=sys.stderr)
        return 1
    except Exception as exc:                      # pragma: no cover - safety
        print("error [stage: %s] %s" % (args.command, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
