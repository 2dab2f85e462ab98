"""Decoder-only transformer with grouped KV heads and gated mixed attention.

Pre-norm blocks, rotary positions on q/k, GELU feed-forward, untied output
head, no biases outside layernorm.  In ``mixed`` mode each KV head's output
is ``alpha * full + (1 - alpha) * streaming``, with one gate per
(layer, kv-head) shared by every query head of that group.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import streaming_mask

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_query_heads: int = 8
    n_kv_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 64
    max_seq_len: int = 256
    sink_train: int = 8
    local_train: int = 16
    ffn_mult: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.n_layers, self.n_query_heads, self.n_kv_heads, self.head_dim) < 1:
            raise ValueError("layer/head counts and head_dim must be positive")
        if self.n_query_heads % self.n_kv_heads:
            raise ValueError(f"n_kv_heads={self.n_kv_heads} must divide n_query_heads={self.n_query_heads}")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.sink_train < 1 or self.local_train < 1:
            raise ValueError("sink_train and local_train must be >= 1")
        if self.sink_train + self.local_train >= self.max_seq_len:
            raise ValueError("sink_train + local_train must be < max_seq_len")

    @property
    def d_model(self) -> int:
        return self.n_query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


class GatingAdapters:
    """Full-attention weights alpha in [0, 1], shape (n_layers, n_kv_heads)."""

    def __init__(self, alpha):
        alpha = np.array(alpha, dtype=np.float32)
        if alpha.ndim != 2:
            raise ValueError(f"alpha must be 2-D, got shape {alpha.shape}")
        if np.any(alpha < 0) or np.any(alpha > 1) or not np.all(np.isfinite(alpha)):
            raise ValueError("alpha entries must lie in [0, 1]")
        self.alpha = alpha

    @classmethod
    def constant(cls, config: ModelConfig, value: float = 1.0) -> "GatingAdapters":
        return cls(np.full((config.n_layers, config.n_kv_heads), value, dtype=np.float32))

    @property
    def shape(self) -> tuple:
        return self.alpha.shape

    def copy(self) -> "GatingAdapters":
        return GatingAdapters(self.alpha.copy())

    def __repr__(self) -> str:
        return f"GatingAdapters(mean={self.alpha.mean():.4f}, shape={self.alpha.shape})"


def weight_shapes(config: ModelConfig) -> dict:
    d, hd = config.d_model, config.head_dim
    shapes = {"tok_emb": (config.vocab_size, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, config.n_query_heads * hd),
            p + "wk": (d, config.n_kv_heads * hd),
            p + "wv": (d, config.n_kv_heads * hd),
            p + "wo": (config.n_query_heads * hd, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, config.d_ff), p + "w2": (config.d_ff, d),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "lm_head": (d, config.vocab_size)})
    return shapes


def init_weights(config: ModelConfig, seed: int = 0, requires_grad: bool = True) -> dict:
    """Seeded Gaussian init (std 0.02, residual outputs scaled by depth)."""
    rng = np.random.default_rng(seed)
    resid = 0.02 / math.sqrt(2 * config.n_layers)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            std = resid if name.endswith(("wo", "w2")) else 0.02
            arr = rng.normal(0.0, std, size=shape)
        weights[name] = Tensor(arr.astype(np.float32), requires_grad=requires_grad, name=name)
    return weights


def freeze(weights: dict) -> dict:
    for t in weights.values():
        t.requires_grad = False
    return weights


def check_weights(weights: dict, config: ModelConfig) -> None:
    expected = weight_shapes(config)
    missing = set(expected) - set(weights)
    extra = set(weights) - set(expected)
    if missing or extra:
        raise ValueError(f"weight names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise ValueError(f"{name}: shape {weights[name].shape}, expected {shape}")


@lru_cache(maxsize=16)
def rope_tables(n_pos: int, head_dim: int, base: float = 10000.0):
    inv = 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(n_pos, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


@lru_cache(maxsize=64)
def _fill_masks(T: int, sink: int, local: int):
    causal = np.tril(np.ones((T, T), dtype=bool))
    return ~causal, ~streaming_mask(T, sink, local)


def attention_head(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention for one head; ``mask[i, j]`` allows i -> j."""
    mask = np.asarray(mask, dtype=bool)
    T = q.shape[-2]
    if mask.shape != (T, T):
        raise ad.ShapeError("attention_head", q.shape, mask.shape)
    if np.any(np.triu(mask, 1)):
        raise ValueError("attention mask lets a position attend to the future")
    if not np.all(mask.any(axis=1)):
        raise ValueError("attention mask leaves a query row with nothing visible")
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax_lastdim(ad.mask_fill(logits, ~mask, NEG_INF)), v)


def mixed_attention(q: Tensor, k: Tensor, v: Tensor, alpha_entry, sink: int, local: int) -> Tensor:
    """``alpha * full + (1 - alpha) * streaming`` for a single (T, head_dim) head."""
    if not isinstance(alpha_entry, Tensor):
        alpha_entry = Tensor(alpha_entry)
    a = float(alpha_entry.data.reshape(-1)[0])
    if alpha_entry.size != 1 or not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha must be a scalar in [0, 1], got {alpha_entry.data}")
    if sink < 1 or local < 1:
        raise ValueError("sink and local must be >= 1")
    T = q.shape[0]
    full = attention_head(q, k, v, np.tril(np.ones((T, T), dtype=bool)))
    stream = attention_head(q, k, v, streaming_mask(T, sink, local))
    gate = ad.expand(ad.reshape(alpha_entry, (1, 1)), full.shape)
    return ad.add(stream, ad.mul(gate, ad.sub(full, stream)))


def _alpha_tensor(adapters) -> Tensor:
    if isinstance(adapters, Tensor):
        return adapters
    if isinstance(adapters, GatingAdapters):
        return Tensor(adapters.alpha)
    return Tensor(np.asarray(adapters, dtype=np.float32))


def _repeat_kv(x: Tensor, B: int, n_kv: int, group: int, T: int, hd: int) -> Tensor:
    if group == 1:
        return x
    x = ad.reshape(x, (B, n_kv, 1, T, hd))
    x = ad.expand(x, (B, n_kv, group, T, hd))
    return ad.reshape(x, (B, n_kv * group, T, hd))


def forward_logits(tokens, weights: dict, config: ModelConfig, adapters=None, mode: str = "full",
                   sink: int | None = None, local: int | None = None) -> Tensor:
    """Teacher-forcing logits, (T, V) for a 1-D input or (B, T, V) for 2-D.

    ``mixed`` mode gates every head between full and streaming attention
    (``sink``/``local`` default to the config's training sizes).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    B, T = ids.shape
    if T > config.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    if mode not in ("full", "mixed"):
        raise ValueError(f"unknown mode {mode!r}")
    alpha = None
    if mode == "mixed":
        if adapters is None:
            raise ValueError("mixed mode needs gating adapters")
        alpha = _alpha_tensor(adapters)
        if alpha.shape != (config.n_layers, config.n_kv_heads):
            raise ad.ShapeError("forward_logits", alpha.shape, (config.n_layers, config.n_kv_heads))
    sink = config.sink_train if sink is None else sink
    local = config.local_train if local is None else local

    L, Hq, Hkv, hd, g = config.n_layers, config.n_query_heads, config.n_kv_heads, config.head_dim, config.group_size
    cos, sin = rope_tables(config.max_seq_len, hd, config.rope_base)
    cos, sin = cos[:T], sin[:T]
    causal_fill, stream_fill = _fill_masks(T, sink, local)
    inv_sqrt = 1.0 / math.sqrt(hd)

    x = ad.embedding_lookup(weights["tok_emb"], ids)
    for l in range(L):
        p = f"layers.{l}."
        h = ad.layernorm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = ad.transpose(ad.reshape(ad.matmul(h, weights[p + "wq"]), (B, T, Hq, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.matmul(h, weights[p + "wk"]), (B, T, Hkv, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(ad.matmul(h, weights[p + "wv"]), (B, T, Hkv, hd)), (0, 2, 1, 3))
        q = ad.rope(q, cos, sin)
        k = ad.rope(k, cos, sin)
        k = _repeat_kv(k, B, Hkv, g, T, hd)
        v = _repeat_kv(v, B, Hkv, g, T, hd)
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        full = ad.matmul(ad.softmax_lastdim(ad.mask_fill(logits, causal_fill, NEG_INF)), v)
        if alpha is not None:
            stream = ad.matmul(ad.softmax_lastdim(ad.mask_fill(logits, stream_fill, NEG_INF)), v)
            a = ad.reshape(ad.getitem(alpha, l), (1, Hkv, 1, 1, 1))
            a = ad.reshape(ad.expand(a, (B, Hkv, g, T, hd)), (B, Hq, T, hd))
            att = ad.add(stream, ad.mul(a, ad.sub(full, stream)))
        else:
            att = full
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, Hq * hd))
        x = ad.add(x, ad.matmul(att, weights[p + "wo"]))
        h = ad.layernorm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        x = ad.add(x, ad.matmul(ad.gelu(ad.matmul(h, weights[p + "w1"])), weights[p + "w2"]))
    x = ad.layernorm(x, weights["ln_f.g"], weights["ln_f.b"])
    out = ad.matmul(x, weights["lm_head"])
    if single:
        out = ad.reshape(out, (T, config.vocab_size))
    return out


def token_logprobs(tokens, targets, weights: dict, config: ModelConfig, adapters=None,
                   mode: str = "full", temperature: float = 1.0) -> Tensor:
    """log p(targets[b, t] | tokens[b, :t+1]) as a (B, T) tensor."""
    ids = np.asarray(tokens, dtype=np.int64)
    tg = np.asarray(targets, dtype=np.int64)
    if ids.ndim == 1:
        ids, tg = ids[None], tg[None]
    B, T = ids.shape
    logits = forward_logits(ids, weights, config, adapters=adapters, mode=mode)
    flat = ad.reshape(logits, (B * T, config.vocab_size))
    if temperature != 1.0:
        flat = ad.scale(flat, 1.0 / temperature)
    nll = ad.cross_entropy(flat, tg.reshape(-1), reduction="none")
    return ad.scale(ad.reshape(nll, (B, T)), -1.0)


def weights_from_arrays(arrays: dict, requires_grad: bool = False) -> dict:
    return {name: Tensor(np.asarray(a, dtype=np.float32), requires_grad=requires_grad, name=name)
            for name, a in arrays.items()}
