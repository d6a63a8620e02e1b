"""Static depth-pruning baselines at matched sparsity.

Three ways to pick one fixed set of blocks to skip: greedy removal of the
block whose output is most similar to its input (redundancy), a one-shot
ranking by each block's solo perplexity impact, and a small evolutionary
search over sparsity-exact masks. All are deterministic given (model,
data, seed) and emit the same library format as the trained masks, so the
evaluation harness treats them interchangeably.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .gates import MaskCandidate
from .model import mask_length
from .routing import MaskLibrary, evaluate_masked_ppl

STATIC_LOG_ALPHA = 2.0   # synthetic gate values for emitted libraries


@dataclass
class StaticMaskResult:
    method: str
    binary_mask: np.ndarray
    score_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.binary_mask = np.asarray(self.binary_mask, dtype=np.int8)


def _calib_windows(calib_data, win_len=64, max_windows=16):
    """Fixed-stride equal-length windows; padding would pollute the stats."""
    parts = [np.asarray(d, dtype=np.int64).reshape(-1) for d in calib_data]
    parts = [p for p in parts if p.size]
    if not parts:
        raise ConfigError("calibration data is empty")
    stream = np.concatenate(parts)
    if stream.size < 2:
        raise ConfigError("calibration data has fewer than 2 tokens")
    win = int(min(win_len, stream.size))
    count = min(max_windows, stream.size // win)
    rows = [stream[i * win:(i + 1) * win] for i in range(max(count, 1))]
    return np.stack(rows)


def _require_valid_removal(model, num_remove, granularity):
    b = mask_length(model.config, granularity)
    if not 0 <= num_remove < b:
        raise ContractError("num_remove must lie in [0, %d), got %d"
                            % (b, num_remove))
    return b


def sleb_prune(model, calib_data, num_remove, granularity=None):
    """Iteratively mask the block whose output best matches its input.

    A block that barely changes the residual stream (cosine near 1) is
    redundant; removal repeats `num_remove` times, rescoring each round
    under the masks chosen so far. Ties go to the lower flat index.
    """
    b = _require_valid_removal(model, num_remove, granularity)
    windows = _calib_windows(calib_data)
    mask = np.ones(b, dtype=np.int8)
    trace = []
    per_layer = b == model.config.num_layers
    for _ in range(num_remove):
        pairs = model.forward_trace(windows, mask=mask,
                                    granularity=granularity)
        scores = np.full(b, -np.inf)
        for i in range(b):
            if mask[i] == 0:
                continue
            if per_layer:
                # Whole-layer unit: stream entering attention vs leaving ffn.
                x, y = pairs[2 * i][0], pairs[2 * i + 1][1]
            else:
                x, y = pairs[i]
            num = np.sum(x * y, axis=-1)
            den = np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1)
            scores[i] = float(np.mean(num / np.maximum(den, 1e-12)))
        pick = int(np.argmax(scores))   # argmax ties -> lowest index
        mask[pick] = 0
        trace.append({"removed": pick, "cosine": float(scores[pick])})
    return StaticMaskResult(method="sleb", binary_mask=mask,
                            score_trace=trace)


def oneshot_importance_prune(model, calib_data, num_remove,
                             metric="ppl-increase", granularity=None):
    """Single-pass ranking: mask the blocks the model misses least.

    Importance of block i is the calibration perplexity with only block i
    masked, measured once against the dense model.
    """
    if metric != "ppl-increase":
        raise ConfigError("unsupported importance metric %r" % metric)
    b = _require_valid_removal(model, num_remove, granularity)
    docs = [np.asarray(d, dtype=np.int64).reshape(-1) for d in calib_data]
    ppls = np.empty(b)
    for i in range(b):
        solo = np.ones(b, dtype=np.int8)
        solo[i] = 0
        ppls[i] = evaluate_masked_ppl(model, solo, docs,
                                      granularity=granularity)
    mask = np.ones(b, dtype=np.int8)
    order = np.argsort(ppls, kind="stable")   # ties -> lower flat index
    mask[order[:num_remove]] = 0
    trace = [{"block": i, "solo_ppl": float(ppls[i])} for i in range(b)]
    return StaticMaskResult(method="oneshot-ppl", binary_mask=mask,
                            score_trace=trace)


def _random_exact_mask(b, num_zeros, rng):
    mask = np.ones(b, dtype=np.int8)
    mask[rng.choice(b, size=num_zeros, replace=False)] = 0
    return mask


def _swap_mutation(mask, rng):
    child = mask.copy()
    zeros = np.flatnonzero(child == 0)
    ones = np.flatnonzero(child == 1)
    if zeros.size and ones.size:
        child[rng.choice(zeros)] = 1
        child[rng.choice(ones)] = 0
    return child


def evopress_search(model, calib_data, target_sparsity, generations,
                    population, seed=0, granularity=None):
    """Evolutionary search over sparsity-exact masks, elitist selection.

    Every candidate keeps exactly the target zero count; offspring swap
    one masked block for an unmasked one. Fitness is calibration
    perplexity (cached per mask), and the best mask is never discarded,
    so best fitness is non-increasing across generations.
    """
    if generations < 0 or population < 1:
        raise ConfigError("need generations >= 0 and population >= 1")
    b = mask_length(model.config, granularity)
    num_zeros = int(np.floor(target_sparsity * b + 0.5))
    if not 0 <= num_zeros < b:
        raise ContractError("target_sparsity %g leaves no blocks"
                            % target_sparsity)
    docs = [np.asarray(d, dtype=np.int64).reshape(-1) for d in calib_data]
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    cache = {}

    def fitness(mask):
        key = mask.tobytes()
        if key not in cache:
            cache[key] = evaluate_masked_ppl(model, mask, docs,
                                             granularity=granularity)
        return cache[key]

    pool = [_random_exact_mask(b, num_zeros, rng) for _ in range(population)]
    pool.sort(key=fitness)
    best_trace = [fitness(pool[0])]
    survivors = max(1, population // 4)
    for _ in range(generations):
        parents = pool[:survivors]
        children = []
        while len(parents) + len(children) < population:
            parent = parents[len(children) % len(parents)]
            children.append(_swap_mutation(parent, rng))
        pool = parents + children
        pool.sort(key=fitness)
        best_trace.append(fitness(pool[0]))
    return StaticMaskResult(method="evopress", binary_mask=pool[0],
                            score_trace=best_trace)


def static_library(model, result, encoder_config, granularity,
                   target_sparsity):
    """Wrap a static mask as a one-candidate library; routes always hit it."""
    dim = encoder_config.get("dim", 0)
    mask = result.binary_mask
    log_alpha = np.where(mask == 1, STATIC_LOG_ALPHA,
                         -STATIC_LOG_ALPHA).astype(np.float32)
    cand = MaskCandidate(cluster_id=0,
                         centroid=np.zeros(dim, dtype=np.float32),
                         log_alpha=log_alpha,
                         binary_mask=mask)
    return MaskLibrary(model_fingerprint=model.fingerprint(),
                       encoder=encoder_config,
                       granularity=granularity
                       if granularity is not None
                       else model.config.granularity,
                       target_sparsity=target_sparsity,
                       candidates=[cand],
                       metadata={"method": result.method})
