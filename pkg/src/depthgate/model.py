"""Decoder-only transformer with maskable attention and feed-forward branches.

Architecture: pre-norm residual blocks, RMS normalization, rotary positions
on queries and keys, grouped-query attention (`num_kv_heads` may divide
`num_heads`), and a gated feed-forward with three matrices. Each layer
contributes two maskable branches, attention and feed-forward.

Three execution paths share the weights:

* ``forward_train``: batched, autodiff, optional continuous per-branch gates
  multiplying branch outputs. Nothing is skipped.
* ``logits_eval``: batched NumPy with an optional binary mask. A masked
  feed-forward branch is not computed at all. A masked attention branch still
  computes its key/value projections (so the cost model and the cached path
  agree) but skips queries, scores, mixing, and the output projection, and
  contributes nothing to the residual stream.
* ``forward_infer``: single-token NumPy step against a key/value cache.
  Masked attention branches still append their (rotated) keys and values to
  the cache, keeping every layer's cache the same length.

Matrix multiplications in the NumPy paths run through an instrumented helper
so executed FLOPs can be counted and checked against the analytic model.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from depthgate import backend
from depthgate import tensor as T
from depthgate.errors import CacheError, ConfigError, ContractError, ShapeError

GRANULARITIES = ("block", "layer")


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    num_layers: int
    num_heads: int
    num_kv_heads: int
    ffn_dim: int
    max_seq_len: int
    vocab_size: int = 258
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    granularity: str = "block"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigError("granularity must be one of %s, got %r"
                              % (GRANULARITIES, self.granularity))
        for name in ("dim", "num_layers", "num_heads", "num_kv_heads",
                     "ffn_dim", "max_seq_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name)
        if self.dim % self.num_heads != 0:
            raise ConfigError("dim %d not divisible by num_heads %d"
                              % (self.dim, self.num_heads))
        if self.num_heads % self.num_kv_heads != 0:
            raise ConfigError("num_heads %d not divisible by num_kv_heads %d"
                              % (self.num_heads, self.num_kv_heads))
        if (self.dim // self.num_heads) % 2 != 0:
            raise ConfigError("head dim %d must be even for rotary positions"
                              % (self.dim // self.num_heads))

    @property
    def head_dim(self):
        return self.dim // self.num_heads

    @property
    def kv_dim(self):
        return self.num_kv_heads * self.head_dim


def _resolve_granularity(config, granularity):
    if granularity is None:
        return config.granularity
    if granularity not in GRANULARITIES:
        raise ConfigError("granularity must be one of %s, got %r"
                          % (GRANULARITIES, granularity))
    return granularity


def mask_length(config, granularity=None):
    """Number of mask entries: one per branch, or one per layer."""
    granularity = _resolve_granularity(config, granularity)
    if granularity == "block":
        return 2 * config.num_layers
    return config.num_layers


def block_name(flat_index):
    """Human-readable name of a branch-granularity mask slot."""
    layer, kind = divmod(int(flat_index), 2)
    return "layer%d.%s" % (layer, "attn" if kind == 0 else "ffn")


def validate_mask(mask, config, granularity=None):
    granularity = _resolve_granularity(config, granularity)
    mask = np.asarray(mask)
    want = mask_length(config, granularity)
    if mask.shape != (want,):
        raise ContractError("mask shape %s, expected (%d,) for %s granularity"
                            % (mask.shape, want, granularity))
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask entries must be 0 or 1")
    return mask.astype(np.int8)


def branch_keep(mask, config, granularity=None):
    """Expand a binary mask to per-layer (attn_keep, ffn_keep) bool arrays."""
    granularity = _resolve_granularity(config, granularity)
    if mask is None:
        ones = np.ones(config.num_layers, dtype=bool)
        return ones, ones.copy()
    mask = validate_mask(mask, config, granularity)
    if granularity == "block":
        return mask[0::2].astype(bool), mask[1::2].astype(bool)
    return mask.astype(bool), mask.astype(bool)


def branch_gates(soft_mask, config, granularity=None):
    """Expand a soft mask tensor to per-branch scalar gates, flat block order."""
    granularity = _resolve_granularity(config, granularity)
    want = mask_length(config, granularity)
    if soft_mask.data.shape != (want,):
        raise ConfigError("soft mask shape %s, expected (%d,) for %s granularity"
                          % (soft_mask.data.shape, want, granularity))
    if granularity == "block":
        return [soft_mask.select(i) for i in range(want)]
    gates = []
    for i in range(config.num_layers):
        g = soft_mask.select(i)
        gates += [g, g]
    return gates


# -- instrumented matmul -------------------------------------------------

_ACTIVE_COUNTER = None


class FlopCounter:
    """Context manager accumulating 2*m*k*n for every NumPy-path matmul."""

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        global _ACTIVE_COUNTER
        self._saved = _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self._saved
        return False


def _mm(a, b):
    out = np.matmul(a, b)
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.flops += 2 * out.size * a.shape[-1]
    return out


# -- key/value cache -----------------------------------------------------

class KVCache:
    """Per-layer rolling key/value store for incremental decoding.

    Every layer must append exactly once per step, masked or not, so the
    per-layer lengths stay equal; `length` enforces that invariant.
    """

    def __init__(self, config):
        self.config = config
        shape = (config.num_layers, config.num_kv_heads,
                 config.max_seq_len, config.head_dim)
        self._k = np.zeros(shape, dtype=np.float32)
        self._v = np.zeros(shape, dtype=np.float32)
        self._counts = [0] * config.num_layers

    @property
    def length(self):
        if min(self._counts) != max(self._counts):
            raise CacheError("layer cache lengths diverged: %s" % (self._counts,))
        return self._counts[0]

    def append(self, layer, k_t, v_t):
        pos = self._counts[layer]
        if pos >= self.config.max_seq_len:
            raise CacheError("cache full at max_seq_len=%d"
                             % self.config.max_seq_len)
        self._k[layer, :, pos, :] = k_t
        self._v[layer, :, pos, :] = v_t
        self._counts[layer] = pos + 1

    def view(self, layer):
        n = self._counts[layer]
        return self._k[layer, :, :n, :], self._v[layer, :, :n, :]


# -- model ---------------------------------------------------------------

def _weight_specs(config):
    d, f = config.dim, config.ffn_dim
    kv = config.kv_dim
    specs = [("tok_emb", (config.vocab_size, d), "emb")]
    for i in range(config.num_layers):
        p = "layers.%d." % i
        specs += [
            (p + "attn_norm", (d,), "norm"),
            (p + "wq", (d, d), "in"),
            (p + "wk", (d, kv), "in"),
            (p + "wv", (d, kv), "in"),
            (p + "wo", (d, d), "out"),
            (p + "ffn_norm", (d,), "norm"),
            (p + "w_gate", (d, f), "in"),
            (p + "w_up", (d, f), "in"),
            (p + "w_down", (f, d), "out"),
        ]
    specs += [("final_norm", (d,), "norm"), ("lm_head", (d, config.vocab_size), "in")]
    return specs


class TransformerModel:
    def __init__(self, config, weights):
        self.config = config
        self.weights = weights
        hd = config.head_dim
        # Rotary angle tables, one row per absolute position.
        inv_freq = 1.0 / (config.rope_theta
                          ** (np.arange(0, hd, 2, dtype=np.float64) / hd))
        ang = np.arange(config.max_seq_len, dtype=np.float64)[:, None] * inv_freq
        self._cos = np.cos(ang).astype(np.float32)
        self._sin = np.sin(ang).astype(np.float32)

    @classmethod
    def from_random(cls, config, seed=0):
        """Gaussian init, std 0.02; residual-output matrices shrunk by depth."""
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        out_std = 0.02 / math.sqrt(2 * config.num_layers)
        weights = {}
        for name, shape, kind in _weight_specs(config):
            if kind == "norm":
                data = np.ones(shape, dtype=np.float32)
            else:
                std = out_std if kind == "out" else 0.02
                data = rng.normal(0.0, std, size=shape).astype(np.float32)
            weights[name] = T.Tensor(data, requires_grad=True)
        return cls(config, weights)

    def parameters(self):
        return list(self.weights.values())

    def freeze(self):
        for p in self.weights.values():
            p.requires_grad = False
            p.grad = None

    def fingerprint(self):
        """Order-independent digest of all weight names, shapes, and bytes."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            arr = np.ascontiguousarray(self.weights[name].data)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def save_npz(self, path):
        arrays = {name: p.data for name, p in self.weights.items()}
        header = {"format_version": 1, "config": asdict(self.config)}
        arrays["__config__"] = np.frombuffer(
            json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load_npz(cls, path):
        with np.load(path) as data:
            if "__config__" not in data:
                raise ContractError("model file %s has no config record" % path)
            header = json.loads(bytes(data["__config__"]).decode())
            if header.get("format_version") != 1:
                raise ContractError("unsupported model file version %r"
                                    % header.get("format_version"))
            config = ModelConfig(**header["config"])
            weights = {}
            for name, shape, _ in _weight_specs(config):
                if name not in data:
                    raise ContractError("model file missing weight %r" % name)
                arr = data[name]
                if arr.shape != shape:
                    raise ContractError("weight %r has shape %s, expected %s"
                                        % (name, arr.shape, shape))
                weights[name] = T.Tensor(arr.astype(np.float32))
        return cls(config, weights)

    # -- training path (autodiff) ------------------------------------

    def forward_train(self, tokens, soft_mask=None, granularity=None):
        """Next-token loss and logits over `tokens` (batch, seq), autodiff path.

        `soft_mask`, if given, is a 1-D tensor of gate values for the chosen
        granularity; each entry multiplies its branch's output before the
        residual add. Nothing is skipped. Returns (mean cross-entropy scalar,
        logits of shape (batch, seq-1, vocab)).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise ShapeError("forward_train: tokens must be (batch, seq>=2), "
                             "got %s" % (tokens.shape,))
        cfg = self.config
        gates = None if soft_mask is None \
            else branch_gates(soft_mask, cfg, granularity)
        inp, tgt = tokens[:, :-1], tokens[:, 1:]
        bsz, s = inp.shape
        if s > cfg.max_seq_len:
            raise ShapeError("sequence length %d exceeds max_seq_len %d"
                             % (s, cfg.max_seq_len))
        h_dim, n_rep = cfg.head_dim, cfg.num_heads // cfg.num_kv_heads
        cos, sin = self._cos[:s], self._sin[:s]
        w = self.weights

        x = T.embedding(w["tok_emb"], inp)
        for i in range(cfg.num_layers):
            p = "layers.%d." % i
            h = x.rmsnorm(w[p + "attn_norm"], eps=cfg.norm_eps)
            q = (h @ w[p + "wq"]).reshape(bsz, s, cfg.num_heads, h_dim) \
                .transpose((0, 2, 1, 3))
            k = (h @ w[p + "wk"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                .transpose((0, 2, 1, 3))
            v = (h @ w[p + "wv"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                .transpose((0, 2, 1, 3))
            q = T.rope(q, cos, sin)
            k = T.rope(k, cos, sin)
            k = T.repeat_kv(k, n_rep)
            v = T.repeat_kv(v, n_rep)
            scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(h_dim))
            mix = (scores.causal_softmax() @ v).transpose((0, 2, 1, 3)) \
                .reshape(bsz, s, cfg.dim)
            attn_out = mix @ w[p + "wo"]
            if gates is not None:
                attn_out = gates[2 * i] * attn_out
            x = x + attn_out

            h2 = x.rmsnorm(w[p + "ffn_norm"], eps=cfg.norm_eps)
            u = h2 @ w[p + "w_gate"]
            ff = ((u * u.sigmoid()) * (h2 @ w[p + "w_up"])) @ w[p + "w_down"]
            if gates is not None:
                ff = gates[2 * i + 1] * ff
            x = x + ff

        x = x.rmsnorm(w["final_norm"], eps=cfg.norm_eps)
        logits = x @ w["lm_head"]
        loss = logits.reshape(bsz * s, cfg.vocab_size) \
            .cross_entropy(tgt.reshape(-1))
        return loss, logits

    # -- batched evaluation path (NumPy, maskable) --------------------

    def logits_eval(self, tokens, mask=None, granularity=None):
        """Logits (batch, seq, vocab) with binary-mask skip semantics."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError("logits_eval: tokens must be 2-D, got %s"
                             % (tokens.shape,))
        cfg = self.config
        if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
            raise ContractError("token id out of range [0, %d)" % cfg.vocab_size)
        bsz, s = tokens.shape
        if s > cfg.max_seq_len:
            raise ShapeError("sequence length %d exceeds max_seq_len %d"
                             % (s, cfg.max_seq_len))
        attn_keep, ffn_keep = branch_keep(mask, cfg, granularity)
        h_dim, n_rep = cfg.head_dim, cfg.num_heads // cfg.num_kv_heads
        cos, sin = self._cos[:s], self._sin[:s]
        w = {name: p.data for name, p in self.weights.items()}

        x = w["tok_emb"][tokens]
        for i in range(cfg.num_layers):
            p = "layers.%d." % i
            h = self._np_rmsnorm(x, w[p + "attn_norm"])
            k = _mm(h, w[p + "wk"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                .transpose(0, 2, 1, 3)
            k = self._np_rope(k, cos, sin)
            if attn_keep[i]:
                v = _mm(h, w[p + "wv"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                    .transpose(0, 2, 1, 3)
                q = _mm(h, w[p + "wq"]).reshape(bsz, s, cfg.num_heads, h_dim) \
                    .transpose(0, 2, 1, 3)
                q = self._np_rope(q, cos, sin)
                k_r = np.repeat(k, n_rep, axis=1)
                v_r = np.repeat(v, n_rep, axis=1)
                scores = _mm(q, k_r.transpose(0, 1, 3, 2)) / math.sqrt(h_dim)
                probs = backend.causal_softmax_fwd(
                    scores.reshape(-1, s, s), 0).reshape(scores.shape)
                mix = _mm(probs, v_r).transpose(0, 2, 1, 3).reshape(bsz, s, cfg.dim)
                x = x + _mm(mix, w[p + "wo"])
            else:
                # Masked attention: key/value projections are still computed
                # (cost parity with the cached path); nothing is added.
                _mm(h, w[p + "wv"])
            if ffn_keep[i]:
                h2 = self._np_rmsnorm(x, w[p + "ffn_norm"])
                u = _mm(h2, w[p + "w_gate"])
                act = u * backend.sigmoid(u)
                x = x + _mm(act * _mm(h2, w[p + "w_up"]), w[p + "w_down"])

        x = self._np_rmsnorm(x, w["final_norm"])
        return _mm(x, w["lm_head"])

    def eval_nll(self, tokens, mask=None, granularity=None):
        """Per-position next-token negative log-likelihood, float64 (b, s-1)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise ShapeError("eval_nll: tokens must be (batch, seq>=2), got %s"
                             % (tokens.shape,))
        logits = self.logits_eval(tokens[:, :-1], mask, granularity) \
            .astype(np.float64)
        tgt = tokens[:, 1:]
        m = logits.max(axis=-1)
        lse = m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))
        picked = np.take_along_axis(logits, tgt[..., None], axis=-1)[..., 0]
        return lse - picked

    # -- incremental path (NumPy, cached) -----------------------------

    def forward_infer(self, tokens, cache, mask=None, granularity=None):
        """Feed tokens through the cached skip path; logits for the last one.

        `tokens` is a scalar id or a 1-D id sequence; each token appends one
        cache entry in every layer, masked or not.
        """
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise ContractError("forward_infer: empty token sequence")
        logits = None
        for t in tokens:
            logits = self._infer_step(int(t), cache, mask, granularity)
        return logits

    def _infer_step(self, token_id, cache, mask=None, granularity=None):
        cfg = self.config
        if not 0 <= token_id < cfg.vocab_size:
            raise ContractError("token id %d out of range [0, %d)"
                                % (token_id, cfg.vocab_size))
        attn_keep, ffn_keep = branch_keep(mask, cfg, granularity)
        pos = cache.length
        if pos >= cfg.max_seq_len:
            raise CacheError("cache full at max_seq_len=%d" % cfg.max_seq_len)
        h_dim, n_rep = cfg.head_dim, cfg.num_heads // cfg.num_kv_heads
        cos, sin = self._cos[pos], self._sin[pos]
        w = {name: p.data for name, p in self.weights.items()}

        x = w["tok_emb"][token_id].copy()
        for i in range(cfg.num_layers):
            p = "layers.%d." % i
            h = self._np_rmsnorm(x[None, :], w[p + "attn_norm"])
            k_t = _mm(h, w[p + "wk"]).reshape(cfg.num_kv_heads, h_dim)
            k_t = self._np_rope_row(k_t, cos, sin)
            v_t = _mm(h, w[p + "wv"]).reshape(cfg.num_kv_heads, h_dim)
            cache.append(i, k_t, v_t)
            if attn_keep[i]:
                q = _mm(h, w[p + "wq"]).reshape(cfg.num_heads, h_dim)
                q = self._np_rope_row(q, cos, sin)
                k_all, v_all = cache.view(i)
                k_r = np.repeat(k_all, n_rep, axis=0)
                v_r = np.repeat(v_all, n_rep, axis=0)
                scores = _mm(q[:, None, :], k_r.transpose(0, 2, 1))[:, 0, :] \
                    / math.sqrt(h_dim)
                probs = backend.softmax_fwd(scores)
                mix = _mm(probs[:, None, :], v_r)[:, 0, :].reshape(cfg.dim)
                x = x + _mm(mix[None, :], w[p + "wo"])[0]
            if ffn_keep[i]:
                h2 = self._np_rmsnorm(x[None, :], w[p + "ffn_norm"])
                u = _mm(h2, w[p + "w_gate"])
                act = u * backend.sigmoid(u)
                x = x + _mm(act * _mm(h2, w[p + "w_up"]), w[p + "w_down"])[0]

        x = self._np_rmsnorm(x[None, :], w["final_norm"])
        return _mm(x, w["lm_head"])[0]

    def generate(self, prompt, mask=None, steps=0, granularity=None,
                 stop_at_eos=False, eos_id=257):
        """Greedy decoding with an incremental cache.

        Returns prompt plus up to `steps` generated ids; stops early when the
        cache fills or, if `stop_at_eos`, after emitting `eos_id`.
        """
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        if prompt.size == 0:
            raise ContractError("generate: prompt must be non-empty")
        if prompt.size > self.config.max_seq_len:
            raise ShapeError("generate: prompt length %d exceeds max_seq_len %d"
                             % (prompt.size, self.config.max_seq_len))
        if steps < 0:
            raise ContractError("generate: steps must be >= 0")
        seq = list(prompt)
        if steps == 0:
            return np.array(seq, dtype=np.int64)
        cache = KVCache(self.config)
        logits = self.forward_infer(prompt, cache, mask, granularity)
        for _ in range(steps):
            nxt = int(np.argmax(logits))
            seq.append(nxt)
            if stop_at_eos and nxt == eos_id:
                break
            if cache.length >= self.config.max_seq_len:
                break
            logits = self.forward_infer(nxt, cache, mask, granularity)
        return np.array(seq, dtype=np.int64)

    def forward_trace(self, tokens, mask=None, granularity=None):
        """Residual-stream (input, output) pair per branch, flat block order.

        Runs the evaluation path and records the stream before and after each
        branch's contribution; masked branches leave the stream unchanged.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError("forward_trace: tokens must be 2-D, got %s"
                             % (tokens.shape,))
        cfg = self.config
        bsz, s = tokens.shape
        attn_keep, ffn_keep = branch_keep(mask, cfg, granularity)
        h_dim, n_rep = cfg.head_dim, cfg.num_heads // cfg.num_kv_heads
        cos, sin = self._cos[:s], self._sin[:s]
        w = {name: p.data for name, p in self.weights.items()}

        traces = []
        x = w["tok_emb"][tokens]
        for i in range(cfg.num_layers):
            p = "layers.%d." % i
            x_in = x.copy()
            if attn_keep[i]:
                h = self._np_rmsnorm(x, w[p + "attn_norm"])
                q = _mm(h, w[p + "wq"]).reshape(bsz, s, cfg.num_heads, h_dim) \
                    .transpose(0, 2, 1, 3)
                k = _mm(h, w[p + "wk"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                    .transpose(0, 2, 1, 3)
                v = _mm(h, w[p + "wv"]).reshape(bsz, s, cfg.num_kv_heads, h_dim) \
                    .transpose(0, 2, 1, 3)
                q = self._np_rope(q, cos, sin)
                k = self._np_rope(k, cos, sin)
                scores = _mm(q, np.repeat(k, n_rep, axis=1).transpose(0, 1, 3, 2)) \
                    / math.sqrt(h_dim)
                probs = backend.causal_softmax_fwd(
                    scores.reshape(-1, s, s), 0).reshape(scores.shape)
                mix = _mm(probs, np.repeat(v, n_rep, axis=1)) \
                    .transpose(0, 2, 1, 3).reshape(bsz, s, cfg.dim)
                x = x + _mm(mix, w[p + "wo"])
            traces.append((x_in, x.copy()))
            x_in = x.copy()
            if ffn_keep[i]:
                h2 = self._np_rmsnorm(x, w[p + "ffn_norm"])
                u = _mm(h2, w[p + "w_gate"])
                act = u * backend.sigmoid(u)
                x = x + _mm(act * _mm(h2, w[p + "w_up"]), w[p + "w_down"])
            traces.append((x_in, x.copy()))
        return traces

    # -- NumPy helpers ------------------------------------------------

    def _np_rmsnorm(self, x, weight):
        d = x.shape[-1]
        y, _ = backend.rmsnorm_fwd(x.reshape(-1, d), weight, self.config.norm_eps)
        return y.reshape(x.shape)

    @staticmethod
    def _np_rope(x, cos, sin):
        ev, od = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = ev * cos - od * sin
        out[..., 1::2] = ev * sin + od * cos
        return out

    @staticmethod
    def _np_rope_row(x, cos, sin):
        # x: (heads, head_dim); cos/sin: (head_dim // 2,) for one position.
        ev, od = x[:, 0::2], x[:, 1::2]
        out = np.empty_like(x)
        out[:, 0::2] = ev * cos - od * sin
        out[:, 1::2] = ev * sin + od * cos
        return out
