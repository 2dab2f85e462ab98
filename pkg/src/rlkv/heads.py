"""Turn learned gates into deployment cache policies and control policies."""

from __future__ import annotations

import math

import numpy as np

from .kvcache import CachePolicy, Full, Streaming
from .model import GatingAdapters


def _alpha(adapters) -> np.ndarray:
    return np.asarray(adapters.alpha if isinstance(adapters, GatingAdapters) else adapters, dtype=np.float64)


def rank_heads(adapters) -> list:
    """(layer, head, alpha) sorted by alpha descending, then layer, then head."""
    a = _alpha(adapters)
    entries = [(l, h, float(a[l, h])) for l in range(a.shape[0]) for h in range(a.shape[1])]
    return sorted(entries, key=lambda e: (-e[2], e[0], e[1]))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def n_full_heads(sparsity: float, n_heads: int) -> int:
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    return round_half_up((1.0 - sparsity) * n_heads)


def _shape(ranking) -> tuple:
    return max(e[0] for e in ranking) + 1, max(e[1] for e in ranking) + 1


def _policy(full: set, shape, sink: int, local: int) -> CachePolicy:
    L, H = shape
    stream = Streaming(sink, local)
    return CachePolicy(tuple(tuple(Full() if (l, h) in full else stream for h in range(H)) for l in range(L)))


def policy_for_sparsity(ranking, sparsity: float, sink: int, local: int) -> CachePolicy:
    """Top-k ranked heads keep a full cache, k = round_half_up((1 - s) * L * H)."""
    k = n_full_heads(sparsity, len(ranking))
    return _policy({(l, h) for l, h, _ in ranking[:k]}, _shape(ranking), sink, local)


def random_policy(sparsity: float, n_layers: int, n_heads: int, sink: int, local: int, seed) -> CachePolicy:
    """Same head count as :func:`policy_for_sparsity`, heads drawn uniformly."""
    n = n_layers * n_heads
    k = n_full_heads(sparsity, n)
    rng = np.random.default_rng(seed)
    pick = rng.choice(n, size=k, replace=False)
    return _policy({(int(i) // n_heads, int(i) % n_heads) for i in pick}, (n_layers, n_heads), sink, local)


def mask_top_heads(ranking, fraction: float, sink: int, local: int) -> CachePolicy:
    """Compress the top ``round_half_up(f * L * H)`` heads and keep the rest full."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    k = round_half_up(fraction * len(ranking))
    top = {(l, h) for l, h, _ in ranking[:k]}
    return _policy({(l, h) for l, h, _ in ranking} - top, _shape(ranking), sink, local)


def format_ranking(ranking) -> str:
    lines = ["rank\tlayer\thead\talpha"]
    lines += [f"{i}\t{l}\t{h}\t{a:.9g}" for i, (l, h, a) in enumerate(ranking)]
    return "\n".join(lines) + "\n"


def parse_ranking(text: str) -> list:
    rows = [ln.split("\t") for ln in text.strip().splitlines()[1:]]
    return [(int(r[1]), int(r[2]), float(r[3])) for r in rows]
