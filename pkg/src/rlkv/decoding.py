"""Incremental decoding with per-head KV caches.

:class:`Decoder` runs one token at a time over plain numpy copies of the
weights.  Each (layer, kv-head) owns a cache that follows its
:class:`~rlkv.kvcache.CachePolicy` entry: full heads keep everything,
streaming heads physically drop positions outside sink + recent window,
score-evict heads drop the lowest accumulated attention.  With gating
adapters the decoder instead keeps full caches and mixes full and streaming
attention per head, reproducing ``forward_logits(mode="mixed")``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kvcache import CachePolicy, Full, ScoreEvict, Streaming
from .model import GatingAdapters, ModelConfig, rope_tables

_SQRT_2_PI = np.float32(np.sqrt(2.0 / np.pi))


def _layernorm(x, g, b, eps=np.float32(1e-5)):
    mu = x.mean()
    xc = x - mu
    var = (xc * xc).mean()
    return xc / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_PI * (x + np.float32(0.044715) * x ** 3)))


def _log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


class Decoder:
    """One decode stream.  Not thread-safe; use one instance per stream."""

    def __init__(self, weights: dict, config: ModelConfig, policy: CachePolicy | None = None,
                 adapters: GatingAdapters | None = None, sink: int | None = None,
                 local: int | None = None):
        self.config = config
        self.w = {k: np.ascontiguousarray(getattr(v, "data", v), dtype=np.float32) for k, v in weights.items()}
        L, Hkv, hd = config.n_layers, config.n_kv_heads, config.head_dim
        if adapters is not None and policy is not None and not policy.is_all_full():
            raise ValueError("mixed decoding keeps full caches; pass either adapters or a compressing policy")
        if policy is None:
            policy = CachePolicy.all_full(L, Hkv)
        if (policy.n_layers, policy.n_kv_heads) != (L, Hkv):
            raise ValueError(f"policy is {policy.n_layers}x{policy.n_kv_heads}, model has {L}x{Hkv} kv heads")
        self.policy = policy
        self.mixed = adapters is not None
        self.kind = np.zeros((L, Hkv), dtype=np.int64)
        self.sink = np.ones((L, Hkv), dtype=np.int64)
        self.local = np.ones((L, Hkv), dtype=np.int64)
        self.window = np.ones((L, Hkv), dtype=np.int64)
        self.budget = np.ones((L, Hkv), dtype=np.float64)
        self.alpha = np.ones((L, Hkv), dtype=np.float32)
        if self.mixed:
            alpha = adapters.alpha if isinstance(adapters, GatingAdapters) else np.asarray(adapters)
            self.kind[:] = kernels.MIXED
            self.sink[:] = config.sink_train if sink is None else sink
            self.local[:] = config.local_train if local is None else local
            self.alpha[:] = alpha
        else:
            for (l, h), p in policy.items():
                if isinstance(p, Streaming):
                    self.kind[l, h] = kernels.STREAMING
                    self.sink[l, h], self.local[l, h] = p.sink, p.local
                elif isinstance(p, ScoreEvict):
                    self.kind[l, h] = kernels.SCORE_EVICT
                    self.budget[l, h], self.window[l, h] = p.budget_fraction, p.window
        T = config.max_seq_len
        self.caps = []
        self.K, self.V, self.pos, self.acc, self.count, self.probs = [], [], [], [], [], []
        for l in range(L):
            need = [min(T, self.sink[l, h] + self.local[l, h] + 1) if self.kind[l, h] == kernels.STREAMING else T
                    for h in range(Hkv)]
            cap = max(need)
            self.caps.append(cap)
            self.K.append(np.zeros((Hkv, cap, hd), dtype=np.float32))
            self.V.append(np.zeros((Hkv, cap, hd), dtype=np.float32))
            self.pos.append(np.zeros((Hkv, cap), dtype=np.int64))
            self.acc.append(np.zeros((Hkv, cap), dtype=np.float64))
            self.count.append(np.zeros(Hkv, dtype=np.int64))
            self.probs.append(np.zeros((config.n_query_heads, cap), dtype=np.float32))
        self.cos, self.sin = rope_tables(T, hd, config.rope_base)
        self._out = np.zeros((config.n_query_heads, hd), dtype=np.float32)
        self._evicting = [bool(np.any(self.kind[l] == kernels.SCORE_EVICT)) for l in range(L)]
        self._row_pos = [None] * L
        self.t = 0

    def _rope(self, x, t):
        half = x.shape[-1] // 2
        c, s = self.cos[t], self.sin[t]
        x1, x2 = x[:, :half], x[:, half:]
        return np.ascontiguousarray(np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=1))

    def step(self, token: int) -> np.ndarray:
        """Feed ``token`` at the next position; return next-token logits (V,)."""
        cfg, w, t = self.config, self.w, self.t
        if t >= cfg.max_seq_len:
            raise ValueError(f"decode position {t} reaches max_seq_len {cfg.max_seq_len}")
        Hq, Hkv, hd = cfg.n_query_heads, cfg.n_kv_heads, cfg.head_dim
        x = w["tok_emb"][int(token)].copy()
        out = self._out
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            h = _layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
            q = self._rope((h @ w[p + "wq"]).reshape(Hq, hd), t)
            k = self._rope((h @ w[p + "wk"]).reshape(Hkv, hd), t)
            v = np.ascontiguousarray((h @ w[p + "wv"]).reshape(Hkv, hd))
            if self._evicting[l]:
                # probs index the slots as they were before eviction
                self._row_pos[l] = [np.append(self.pos[l][j, :self.count[l][j]], t) for j in range(Hkv)]
            kernels.cache_attend(q, k, v, t, self.K[l], self.V[l], self.pos[l], self.acc[l], self.count[l],
                                 self.kind[l], self.sink[l], self.local[l], self.window[l], self.budget[l],
                                 self.alpha[l], out, self.probs[l])
            x = x + out.reshape(-1) @ w[p + "wo"]
            h = _layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            x = x + _gelu(h @ w[p + "w1"]) @ w[p + "w2"]
        self.t = t + 1
        return _layernorm(x, w["ln_f.g"], w["ln_f.b"]) @ w["lm_head"]

    def feed(self, tokens) -> np.ndarray:
        logits = None
        for tok in tokens:
            logits = self.step(tok)
        return logits

    def kept_positions(self, layer: int, kv_head: int) -> np.ndarray:
        return self.pos[layer][kv_head, :self.count[layer][kv_head]].copy()

    def kept_counts(self) -> np.ndarray:
        return np.array([c for c in self.count], dtype=np.int64)

    def attention_row(self, layer: int, query_head: int) -> np.ndarray:
        """Attention weights of the last step over absolute positions [0, t)."""
        j = query_head // self.config.group_size
        row = np.zeros(self.t, dtype=np.float64)
        if self.kind[layer, j] == kernels.SCORE_EVICT:
            pos = self._row_pos[layer][j]
        else:
            pos = self.pos[layer][j, :self.count[layer][j]]
        row[pos] = self.probs[layer][query_head, :len(pos)]
        return row

    def cache_bytes(self, bytes_per_value: int = 4) -> int:
        return int(self.kept_counts().sum()) * 2 * self.config.head_dim * bytes_per_value


def decode_with_policy(tokens, weights: dict, config: ModelConfig, policy: CachePolicy | None = None):
    """Feed ``tokens`` through a fresh decoder; return (next logits, decoder)."""
    dec = Decoder(weights, config, policy=policy)
    logits = dec.feed(tokens)
    return logits, dec


@dataclass
class Generation:
    tokens: list
    logprobs: list
    truncated: bool
    prompt_len: int
    cache_counts: np.ndarray = field(default=None, repr=False)

    @property
    def total_len(self) -> int:
        return self.prompt_len + len(self.tokens)


def generate(prompt, weights: dict, config: ModelConfig, adapters: GatingAdapters | None = None,
             policy: CachePolicy | None = None, max_new: int = 64, temperature: float = 0.0,
             seed=0, stop_token: int | None = None) -> Generation:
    """Sample (or greedy-decode when ``temperature == 0``) up to ``max_new`` tokens.

    ``logprobs[i]`` is the log-probability of ``tokens[i]`` under the
    distribution it was drawn from (softmax of logits / temperature; plain
    softmax for greedy).  Generation stops after ``stop_token`` or when the
    context fills up.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if stop_token is None:
        from .tasks import EOS
        stop_token = EOS
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    rng = np.random.default_rng(seed)
    dec = Decoder(weights, config, policy=policy, adapters=adapters)
    logits = dec.feed(prompt)
    out, lps = [], []
    truncated = True
    for _ in range(max_new):
        if temperature == 0:
            lp = _log_softmax(logits)
            tok = int(np.argmax(logits))
        else:
            lp = _log_softmax(np.asarray(logits, dtype=np.float64) / temperature)
            cdf = np.cumsum(np.exp(lp))
            tok = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))
        out.append(tok)
        lps.append(float(lp[tok]))
        if tok == stop_token:
            truncated = False
            break
        if dec.t >= config.max_seq_len:
            break
        logits = dec.step(tok)
    return Generation(out, lps, truncated, len(prompt), dec.kept_counts())
