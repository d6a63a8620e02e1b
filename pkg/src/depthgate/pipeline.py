"""End-to-end experiment driver.

Runs corpus loading, base-model training, embedding + clustering, per-cluster
gate training, binarization, library assembly, routed evaluation, and static
baselines, then writes a CSV/plain-text report. Every stage persists its
artifacts before the next one starts, so a failure leaves partial results
behind and is re-raised tagged with the stage name.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tokenizer
from .baselines import (evopress_search, oneshot_importance_prune, sleb_prune,
                        static_library)
from .clustering import ClusterModel, kmeans_fit
from .corpus import load_corpus, load_corpus_labeled, make_synthetic_corpus
from .encoder import HashedNgramEncoder
from .errors import ConfigError, StageError
from .flops import masked_flops
from .gates import MaskCandidate, binarize
from .mask_training import (SparsityController, TrainingConfig, cluster_rng,
                            train_cluster_mask)
from .model import GRANULARITIES, ModelConfig, TransformerModel, mask_length
from .pretrain import PretrainConfig, pretrain
from .routing import MaskLibrary, _sig9, nearest_cluster, nll_sums

SCHEMA_VERSION = 1
HELDOUT_EVERY = 10          # every 10th doc of a cluster is held out (10%)
ENCODER_DIM = 64
MC_NUM_CHOICES = 4
MC_PROMPT_CHARS = 48
MC_ANSWER_CHARS = 16
_MAX_WORKERS = max(1, min(4, os.cpu_count() or 1))

__all__ = ["ExperimentConfig", "EvalReport", "EvalRow", "load_experiment_config",
           "experiment_config_from_dict", "run_pipeline", "make_mc_tasks",
           "write_tasks_file", "load_tasks", "toy_multiple_choice_eval",
           "make_synthetic_corpus"]


# ----------------------------------------------------------------- config

@dataclass
class BaseModelSpec:
    """Where the base model comes from: a checkpoint path, or training."""
    path: str = ""
    steps: int = 600
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class MaskTrainSpec:
    steps: int = 2000
    batch_size: int = 32
    seq_len: int = 512      # training windows, cropped to the model context
    gate_lr: float = 0.1
    lagrangian_lr: float = 0.1


@dataclass
class BaselineToggles:
    sleb: bool = False
    oneshot: bool = False
    evopress: bool = False
    evopress_generations: int = 50
    evopress_population: int = 8


@dataclass
class ExperimentConfig:
    model: ModelConfig
    corpus_path: str
    out_dir: str
    cluster_counts: list
    sparsities: list
    seeds: list
    granularity: str = "block"
    encoder_dim: int = ENCODER_DIM
    calib_per_cluster: int = 1000
    mc_num_tasks: int = 64
    base: BaseModelSpec = field(default_factory=BaseModelSpec)
    mask: MaskTrainSpec = field(default_factory=MaskTrainSpec)
    baselines: BaselineToggles = field(default_factory=BaselineToggles)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigError("granularity must be one of %s"
                              % (GRANULARITIES,))
        if not self.cluster_counts or any(int(n) < 1
                                          for n in self.cluster_counts):
            raise ConfigError("cluster_counts must be >= 1")
        if not self.sparsities or any(not 0.0 <= float(s) < 1.0
                                      for s in self.sparsities):
            raise ConfigError("sparsities must lie in [0, 1)")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.calib_per_cluster < 1 or self.mc_num_tasks < 1:
            raise ConfigError("calib_per_cluster and mc_num_tasks must be "
                              "positive")
        if not Path(self.corpus_path).exists():
            raise ConfigError("corpus path does not exist: %s"
                              % self.corpus_path)
        if self.base.path and not Path(self.base.path).exists():
            raise ConfigError("base model checkpoint does not exist: %s"
                              % self.base.path)


def _take(obj, section, fields):
    """Pop known keys from a config dict; unknown keys are typos."""
    if not isinstance(obj, dict):
        raise ConfigError("section %r must be an object" % section)
    extra = set(obj) - set(fields)
    if extra:
        raise ConfigError("unknown key(s) in %s: %s"
                          % (section, ", ".join(sorted(extra))))
    return {k: obj[k] for k in fields if k in obj}


_MODEL_FIELDS = ("dim", "num_layers", "num_heads", "num_kv_heads", "ffn_dim",
                 "max_seq_len", "vocab_size")
_TOP_FIELDS = ("schema_version", "model", "corpus_path", "out_dir",
               "cluster_counts", "sparsities", "seeds", "granularity",
               "encoder_dim", "calib_per_cluster", "mc_num_tasks",
               "base_model", "mask_training", "baselines")


def experiment_config_from_dict(obj, base_dir="."):
    """Validate a parsed JSON config; relative paths resolve under base_dir."""
    top = _take(obj, "config", _TOP_FIELDS)
    if top.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("config schema_version must be %d" % SCHEMA_VERSION)
    for req in ("model", "corpus_path", "out_dir", "cluster_counts",
                "sparsities", "seeds"):
        if req not in top:
            raise ConfigError("config is missing required key %r" % req)
    granularity = top.get("granularity", "block")
    model = ModelConfig(granularity=granularity,
                        **_take(top["model"], "model", _MODEL_FIELDS))

    def resolve(p):
        p = str(p)
        return p if os.path.isabs(p) else str(Path(base_dir) / p)

    base = BaseModelSpec(**_take(top.get("base_model", {}), "base_model",
                                 ("path", "steps", "batch_size", "seq_len",
                                  "lr", "seed")))
    if base.path:
        base.path = resolve(base.path)
    mask = MaskTrainSpec(**_take(top.get("mask_training", {}), "mask_training",
                                 ("steps", "batch_size", "seq_len", "gate_lr",
                                  "lagrangian_lr")))
    toggles = BaselineToggles(**_take(top.get("baselines", {}), "baselines",
                                      ("sleb", "oneshot", "evopress",
                                       "evopress_generations",
                                       "evopress_population")))
    return ExperimentConfig(
        model=model,
        corpus_path=resolve(top["corpus_path"]),
        out_dir=resolve(top["out_dir"]),
        cluster_counts=[int(n) for n in top["cluster_counts"]],
        sparsities=[float(s) for s in top["sparsities"]],
        seeds=[int(s) for s in top["seeds"]],
        granularity=granularity,
        encoder_dim=int(top.get("encoder_dim", ENCODER_DIM)),
        calib_per_cluster=int(top.get("calib_per_cluster", 1000)),
        mc_num_tasks=int(top.get("mc_num_tasks", 64)),
        base=base, mask=mask, baselines=toggles)


def load_experiment_config(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (path, exc))
    return experiment_config_from_dict(obj, base_dir=path.parent)


# ----------------------------------------------------------------- report

@dataclass
class ClusterPpl:
    cluster: int
    tokens: int
    ppl: float


@dataclass
class EvalRow:
    method: str
    cluster_count: int
    sparsity: float
    seed: int
    overall_ppl: float
    per_cluster: list
    mc_accuracy: float
    flops_pct: float
    heatmap: np.ndarray

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.int8)
        if not np.isin(self.heatmap, (0, 1)).all():
            raise ConfigError("heatmap entries must be 0 or 1")
        total = sum(c.tokens for c in self.per_cluster)
        if total:
            agg = np.exp(sum(c.tokens * np.log(c.ppl)
                             for c in self.per_cluster) / total)
            if abs(agg - self.overall_ppl) > 1e-9 * self.overall_ppl:
                raise ConfigError("per-cluster perplexities do not aggregate "
                                  "to the overall value")


@dataclass
class EvalReport:
    rows: list
    cluster_counts: list
    sparsities: list
    seeds: list
    notes: str = ""

    def select(self, method=None, cluster_count=None, sparsity=None,
               seed=None):
        out = []
        for r in self.rows:
            if method is not None and r.method != method:
                continue
            if cluster_count is not None and r.cluster_count != cluster_count:
                continue
            if sparsity is not None and abs(r.sparsity - sparsity) > 1e-12:
                continue
            if seed is not None and r.seed != seed:
                continue
            out.append(r)
        return out

    def mean_ppl(self, method, cluster_count, sparsity):
        rows = self.select(method, cluster_count, sparsity)
        if not rows:
            raise KeyError("no rows for (%s, N=%d, s=%g)"
                           % (method, cluster_count, sparsity))
        return float(np.mean([r.overall_ppl for r in rows]))


# --------------------------------------------------- multiple-choice tasks

def make_mc_tasks(docs, labels, num_tasks, seed, num_choices=MC_NUM_CHOICES,
                  prompt_chars=MC_PROMPT_CHARS, answer_chars=MC_ANSWER_CHARS):
    """Continuation-selection tasks with balanced answer positions.

    The prompt and true continuation come from one document; distractors are
    same-length spans from documents with a different label when available.
    """
    need = prompt_chars + answer_chars
    usable = [i for i, d in enumerate(docs) if len(d) >= need]
    if len(usable) < 2:
        raise ConfigError("need at least 2 documents of %d+ chars for tasks"
                          % need)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7C]))
    tasks = []
    for t in range(num_tasks):
        i = usable[int(rng.integers(len(usable)))]
        doc = docs[i]
        start = int(rng.integers(0, len(doc) - need + 1))
        prompt = doc[start:start + prompt_chars]
        true = doc[start + prompt_chars:start + need]
        pool = [j for j in usable if labels[j] != labels[i]]
        if not pool:
            pool = [j for j in usable if j != i]
        distractors = []
        for _ in range(200):
            if len(distractors) == num_choices - 1:
                break
            other = docs[pool[int(rng.integers(len(pool)))]]
            s2 = int(rng.integers(0, len(other) - answer_chars + 1))
            span = other[s2:s2 + answer_chars]
            if span != true and span not in distractors:
                distractors.append(span)
        else:
            raise ConfigError("could not find %d distinct distractors; the "
                              "corpus is too repetitive" % (num_choices - 1))
        answer = t % num_choices
        choices = distractors[:answer] + [true] + distractors[answer:]
        tasks.append({"prompt": prompt, "choices": choices, "answer": answer})
    return tasks


def write_tasks_file(tasks, path):
    with open(path, "w", newline="\n") as fh:
        for task in tasks:
            fh.write(json.dumps(task, sort_keys=True) + "\n")


def load_tasks(path):
    """Parse a JSON-lines tasks file; errors carry the 1-based line number."""
    tasks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError("tasks file line %d: invalid JSON (%s)"
                                  % (lineno, exc.msg))
            if not isinstance(obj, dict):
                raise ConfigError("tasks file line %d: expected an object"
                                  % lineno)
            missing = {"prompt", "choices", "answer"} - set(obj)
            if missing:
                raise ConfigError("tasks file line %d: missing %s"
                                  % (lineno, ", ".join(sorted(missing))))
            prompt, choices, answer = obj["prompt"], obj["choices"], obj["answer"]
            if not isinstance(prompt, str):
                raise ConfigError("tasks file line %d: prompt must be a string"
                                  % lineno)
            if (not isinstance(choices, list) or not choices
                    or not all(isinstance(c, str) for c in choices)):
                raise ConfigError("tasks file line %d: choices must be a "
                                  "non-empty list of strings" % lineno)
            if (not isinstance(answer, int) or isinstance(answer, bool)
                    or not 0 <= answer < len(choices)):
                raise ConfigError("tasks file line %d: answer must be a choice "
                                  "index in [0, %d)" % (lineno, len(choices)))
            tasks.append({"prompt": prompt, "choices": choices,
                          "answer": answer})
    if not tasks:
        raise ConfigError("tasks file is empty")
    return tasks


def _choice_rows(model, task):
    """Token rows (prompt + choice) and per-row choice span for one task."""
    limit = model.config.max_seq_len
    rows = []
    for idx, choice in enumerate(task["choices"]):
        choice_tok = tokenizer.encode(choice)
        if choice_tok.size > limit - 1:
            raise ConfigError("choice %d is longer than the model context"
                              % idx)
        prompt_tok = tokenizer.encode(task["prompt"], add_bos=True)
        keep = limit - choice_tok.size
        if prompt_tok.size > keep:
            prompt_tok = prompt_tok[-keep:]     # keep the recent context
        full = np.concatenate([prompt_tok, choice_tok])
        rows.append((full, prompt_tok.size, choice_tok.size))
    return rows


def _score_tasks(model, tasks, masks, granularity=None, batch_rows=64):
    """Predicted choice per task; masks is one binary mask (or None) per task.

    Each choice is scored by the mean log-likelihood of its tokens given the
    prompt; ties resolve to the lowest choice index. Rows sharing a mask are
    batched together through the padded eval path.
    """
    scores = [[0.0] * len(task["choices"]) for task in tasks]
    groups, order = {}, []
    for t, task in enumerate(tasks):
        key = (None if masks[t] is None
               else np.asarray(masks[t], dtype=np.int8).tobytes())
        if key not in groups:
            groups[key] = []
            order.append(key)
        for c, row in enumerate(_choice_rows(model, task)):
            groups[key].append((t, c, row))
    for key in order:
        mask = None if key is None else np.frombuffer(key, dtype=np.int8)
        jobs = sorted(groups[key], key=lambda j: j[2][0].size)
        for lo in range(0, len(jobs), batch_rows):
            chunk = jobs[lo:lo + batch_rows]
            width = max(j[2][0].size for j in chunk)
            batch = np.zeros((len(chunk), width), dtype=np.int64)
            for r, (_, _, (full, _, _)) in enumerate(chunk):
                batch[r, :full.size] = full
            nll = model.eval_nll(batch, mask=mask, granularity=granularity)
            for r, (t, c, (full, p, _)) in enumerate(chunk):
                scores[t][c] = -float(np.mean(nll[r, p - 1:full.size - 1]))
    return [int(np.argmax(s)) for s in scores]


def _mc_accuracy(model, tasks, masks, granularity=None):
    picks = _score_tasks(model, tasks, masks, granularity)
    hits = sum(p == task["answer"] for p, task in zip(picks, tasks))
    return hits / float(len(tasks))


def toy_multiple_choice_eval(model, mask, tasks_path, granularity=None):
    """Accuracy of length-normalized choice selection under one mask."""
    tasks = load_tasks(tasks_path)
    return _mc_accuracy(model, tasks, [mask] * len(tasks), granularity)


# ----------------------------------------------------------------- stages

@contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _sp_tag(sp):
    return ("%g" % sp).replace(".", "p").replace("-", "m")


def save_clusters(cm, path):
    obj = {"version": 1,
           "centroids": [[_sig9(v) for v in row] for row in cm.centroids],
           "assignments": [int(a) for a in cm.assignments],
           "inertia": float(cm.inertia),
           "n_iter": int(cm.n_iter)}
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_clusters(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("version") != 1:
        raise ConfigError("unsupported clusters file version %r"
                          % obj.get("version"))
    return ClusterModel(
        centroids=np.asarray(obj["centroids"], dtype=np.float64),
        assignments=np.asarray(obj["assignments"], dtype=np.int64),
        inertia=float(obj["inertia"]), n_iter=int(obj["n_iter"]))


def save_gates(candidates, granularity, sparsity, path):
    obj = {"version": 1, "granularity": granularity,
           "target_sparsity": _sig9(sparsity),
           "clusters": [{"id": c.cluster_id,
                         "centroid": [_sig9(v) for v in c.centroid],
                         "log_alpha": [_sig9(v) for v in c.log_alpha]}
                        for c in candidates]}
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_gates(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("version") != 1:
        raise ConfigError("unsupported gates file version %r"
                          % obj.get("version"))
    sparsity = float(obj["target_sparsity"])
    cands = []
    for rec in obj["clusters"]:
        la = np.asarray(rec["log_alpha"], dtype=np.float32)
        cands.append(MaskCandidate(
            cluster_id=int(rec["id"]),
            centroid=np.asarray(rec["centroid"], dtype=np.float32),
            log_alpha=la, binary_mask=binarize(la, sparsity)))
    return cands, obj["granularity"], sparsity


def prepare_base_model(cfg, docs, out_dir):
    """Load the configured checkpoint or train one; returns a frozen model."""
    if cfg.base.path:
        model = TransformerModel.load_npz(cfg.base.path)
        if model.config != cfg.model:
            raise ConfigError("checkpoint architecture %s does not match the "
                              "configured model" % (model.config,))
    else:
        model = TransformerModel.from_random(cfg.model, seed=cfg.base.seed)
        pcfg = PretrainConfig(steps=cfg.base.steps,
                              batch_size=cfg.base.batch_size,
                              seq_len=min(cfg.base.seq_len,
                                          cfg.model.max_seq_len),
                              lr=cfg.base.lr, seed=cfg.base.seed)
        pretrain(model, docs, pcfg, log_path=out_dir / "base_loss.csv")
        model.save_npz(out_dir / "base_model.npz")
    model.freeze()
    return model


def _split_clusters(assignments, n_clusters):
    """Per-cluster (train doc ids, held-out doc ids); every 10th is held out."""
    train, held = [], []
    for k in range(n_clusters):
        ids = np.flatnonzero(assignments == k)
        held.append(ids[::HELDOUT_EVERY])
        keep = np.ones(ids.size, dtype=bool)
        keep[::HELDOUT_EVERY] = False
        train.append(ids[keep])
    return train, held


def _calib_sample(ids, cap, rng):
    if ids.size <= cap:
        return ids
    return np.sort(rng.choice(ids, size=cap, replace=False))


def _cluster_ppls(model, held_tokens, mask_for_cluster, granularity):
    """Per-cluster perplexity plus the token-weighted overall value."""
    per, total_nll, total_tok = [], 0.0, 0
    for k, docs in enumerate(held_tokens):
        docs = [d for d in docs if d.size >= 2]
        if not docs:
            raise ConfigError("cluster %d has no evaluable held-out docs" % k)
        nll, count = nll_sums(model, mask_for_cluster(k), docs, granularity)
        per.append(ClusterPpl(cluster=k, tokens=int(count),
                              ppl=float(np.exp(nll / count))))
        total_nll += nll
        total_tok += count
    return per, float(np.exp(total_nll / total_tok))


def run_pipeline(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = out / "gate_logs"
    logs.mkdir(exist_ok=True)

    with _stage("corpus"):
        corpus_path = Path(cfg.corpus_path)
        if corpus_path.is_dir():
            docs, labels = load_corpus_labeled(corpus_path)
        else:
            docs = load_corpus(corpus_path)
            labels = np.zeros(len(docs), dtype=np.int64)
        doc_tokens = [tokenizer.encode(d) for d in docs]

    with _stage("base-model"):
        model = prepare_base_model(cfg, docs, out)

    with _stage("encode"):
        encoder = HashedNgramEncoder(dim=cfg.encoder_dim)
        encoder.fit(docs)
        embeddings = np.stack([encoder.encode(d) for d in docs])

    with _stage("tasks"):
        tasks = make_mc_tasks(docs, labels, cfg.mc_num_tasks,
                              seed=cfg.base.seed)
        write_tasks_file(tasks, out / "tasks.jsonl")
        task_emb = [encoder.encode(t["prompt"]) for t in tasks]

    flops_seq = cfg.model.max_seq_len
    rows = []
    for n in cfg.cluster_counts:
        for seed in cfg.seeds:
            tag = "N%d_seed%d" % (n, seed)
            with _stage("cluster"):
                cm = kmeans_fit(embeddings, n, seed=seed)
                save_clusters(cm, out / ("clusters_%s.json" % tag))
                train_ids, held_ids = _split_clusters(cm.assignments, n)
                held_tokens = [[doc_tokens[i] for i in ids]
                               for ids in held_ids]
                calib_tokens = []
                for k in range(n):
                    picked = _calib_sample(train_ids[k],
                                           cfg.calib_per_cluster,
                                           cluster_rng(seed, k))
                    calib_tokens.append([doc_tokens[i] for i in picked])
            for sp in cfg.sparsities:
                stag = "%s_s%s" % (tag, _sp_tag(sp))
                rows.extend(_run_cell(cfg, model, encoder, cm, n, seed, sp,
                                      stag, calib_tokens, held_tokens,
                                      tasks, task_emb, out, logs))

    with _stage("report"):
        report = EvalReport(
            rows=rows, cluster_counts=list(cfg.cluster_counts),
            sparsities=list(cfg.sparsities), seeds=list(cfg.seeds),
            notes=("held-out: every %dth document per cluster; FLOPs "
                   "percentages at seq_len %d; normalization, residual and "
                   "activation costs excluded" % (HELDOUT_EVERY, flops_seq)))
        write_report(report, cfg, out)
    return report


def _run_cell(cfg, model, encoder, cm, n, seed, sp, stag, calib_tokens,
              held_tokens, tasks, task_emb, out, logs):
    granularity = cfg.granularity
    with _stage("train-masks"):
        tcfg = TrainingConfig(batch_size=cfg.mask.batch_size,
                              gate_lr=cfg.mask.gate_lr,
                              lagrangian_lr=cfg.mask.lagrangian_lr,
                              max_steps=cfg.mask.steps,
                              train_seq_len=min(cfg.mask.seq_len,
                                                cfg.model.max_seq_len),
                              seed=seed)

        def run_job(k):
            ctrl = SparsityController(s_target=sp)
            return train_cluster_mask(
                model, calib_tokens[k], tcfg, ctrl, granularity=granularity,
                cluster_id=k, centroid=cm.centroids[k].astype(np.float32),
                log_path=logs / ("cluster%d_%s.csv" % (k, stag)))

        if n > 1 and _MAX_WORKERS > 1:
            with ThreadPoolExecutor(max_workers=_MAX_WORKERS) as ex:
                candidates = list(ex.map(run_job, range(n)))
        else:
            candidates = [run_job(k) for k in range(n)]
        save_gates(candidates, granularity, sp, out / ("gates_%s.json" % stag))

    with _stage("library"):
        lib = MaskLibrary(model_fingerprint=model.fingerprint(),
                          encoder=encoder.to_config(),
                          granularity=granularity, target_sparsity=sp,
                          candidates=candidates)
        lib.save(out / ("library_%s.json" % stag))

    rows = []
    with _stage("evaluate"):
        mask_of = [c.binary_mask for c in candidates]
        per, overall = _cluster_ppls(model, held_tokens,
                                     lambda k: mask_of[k], granularity)
        task_masks = [mask_of[nearest_cluster(e, cm.centroids)[0]]
                      for e in task_emb]
        acc = _mc_accuracy(model, tasks, task_masks, granularity)
        pct = [masked_flops(cfg.model, cfg.model.max_seq_len, m,
                            granularity).percentage for m in mask_of]
        weights = np.array([c.tokens for c in per], dtype=np.float64)
        routed_pct = float(np.dot(weights, pct) / weights.sum())
        rows.append(EvalRow(method="routed", cluster_count=n, sparsity=sp,
                            seed=seed, overall_ppl=overall, per_cluster=per,
                            mc_accuracy=acc, flops_pct=routed_pct,
                            heatmap=np.stack(mask_of)))

        pool = [d for k in range(n) for d in calib_tokens[k]]
        pool = pool[:cfg.calib_per_cluster]
        b = mask_length(cfg.model, granularity)
        num_remove = int(np.floor(sp * b + 0.5))
        for method, enabled, run in _baseline_runs(cfg, model, pool, sp,
                                                   num_remove, seed,
                                                   granularity):
            if not enabled:
                continue
            result = run()
            blib = static_library(model, result, encoder.to_config(),
                                  granularity, sp)
            blib.save(out / ("library_%s_%s.json" % (method, stag)))
            bper, boverall = _cluster_ppls(model, held_tokens,
                                           lambda k: result.binary_mask,
                                           granularity)
            bacc = _mc_accuracy(model, tasks,
                                [result.binary_mask] * len(tasks),
                                granularity)
            bpct = masked_flops(cfg.model, cfg.model.max_seq_len,
                                result.binary_mask, granularity).percentage
            rows.append(EvalRow(method=method, cluster_count=n, sparsity=sp,
                                seed=seed, overall_ppl=boverall,
                                per_cluster=bper, mc_accuracy=bacc,
                                flops_pct=bpct,
                                heatmap=result.binary_mask[None, :]))
    return rows


def _baseline_runs(cfg, model, pool, sp, num_remove, seed, granularity):
    t = cfg.baselines
    return [
        ("sleb", t.sleb,
         lambda: sleb_prune(model, pool, num_remove, granularity=granularity)),
        ("oneshot", t.oneshot,
         lambda: oneshot_importance_prune(model, pool, num_remove,
                                          granularity=granularity)),
        ("evopress", t.evopress,
         lambda: evopress_search(model, pool, sp,
                                 generations=t.evopress_generations,
                                 population=t.evopress_population,
                                 seed=seed, granularity=granularity)),
    ]


# ------------------------------------------------------------- report IO

def write_report(report, cfg, out_dir):
    out = Path(out_dir)
    with open(out / "report.csv", "w", newline="\n") as fh:
        fh.write("method,cluster_count,sparsity,seed,overall_ppl,"
                 "mc_accuracy,flops_pct,heldout_tokens\n")
        for r in report.rows:
            tok = sum(c.tokens for c in r.per_cluster)
            fh.write("%s,%d,%.9g,%d,%.9g,%.4f,%.9g,%d\n"
                     % (r.method, r.cluster_count, r.sparsity, r.seed,
                        r.overall_ppl, r.mc_accuracy, r.flops_pct, tok))
    with open(out / "per_cluster.csv", "w", newline="\n") as fh:
        fh.write("method,cluster_count,sparsity,seed,cluster,tokens,ppl\n")
        for r in report.rows:
            for c in r.per_cluster:
                fh.write("%s,%d,%.9g,%d,%d,%d,%.9g\n"
                         % (r.method, r.cluster_count, r.sparsity, r.seed,
                            c.cluster, c.tokens, c.ppl))
    for r in report.rows:
        name = "heatmap_%s_N%d_s%s_seed%d.csv" % (r.method, r.cluster_count,
                                                  _sp_tag(r.sparsity), r.seed)
        with open(out / name, "w", newline="\n") as fh:
            for row in r.heatmap:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
    with open(out / "summary.txt", "w", newline="\n") as fh:
        fh.write(_summary_text(report, cfg))


def _summary_text(report, cfg):
    m = cfg.model
    lines = ["experiment summary", "==================",
             "model: dim=%d layers=%d heads=%d kv_heads=%d ffn=%d "
             "max_seq=%d vocab=%d" % (m.dim, m.num_layers, m.num_heads,
                                      m.num_kv_heads, m.ffn_dim,
                                      m.max_seq_len, m.vocab_size),
             "granularity: %s" % cfg.granularity,
             "cluster counts: %s  sparsities: %s  seeds: %s"
             % (report.cluster_counts, report.sparsities, report.seeds),
             report.notes, "",
             "%-10s %4s %9s %5s %12s %8s %8s"
             % ("method", "N", "sparsity", "seed", "ppl", "mc_acc", "flops%")]
    for r in report.rows:
        lines.append("%-10s %4d %9.4g %5d %12.6g %8.4f %8.4f"
                     % (r.method, r.cluster_count, r.sparsity, r.seed,
                        r.overall_ppl, r.mc_accuracy, r.flops_pct))
    if len(report.cluster_counts) > 1:
        lines += ["", "cluster-count sweep (mean routed held-out ppl over "
                      "seeds)"]
        for sp in report.sparsities:
            parts = []
            for n in report.cluster_counts:
                try:
                    parts.append("N=%d %.6g"
                                 % (n, report.mean_ppl("routed", n, sp)))
                except KeyError:
                    continue
            lines.append("  sparsity %g: %s" % (sp, "  ".join(parts)))
    return "\n".join(lines) + "\n"
