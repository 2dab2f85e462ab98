"""Per-head KV cache policies, visibility rules and memory accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .kernels import score_capacity


@dataclass(frozen=True)
class Full:
    """Keep every token."""

    def capacity(self, n_tokens: int) -> int:
        return n_tokens


@dataclass(frozen=True)
class Streaming:
    """Keep the first ``sink`` positions and the ``local`` most recent ones."""

    sink: int
    local: int

    def __post_init__(self):
        if self.sink < 1 or self.local < 1:
            raise ValueError(f"Streaming needs sink >= 1 and local >= 1, got {self.sink}, {self.local}")

    def capacity(self, n_tokens: int) -> int:
        return min(n_tokens, self.sink + self.local)


@dataclass(frozen=True)
class ScoreEvict:
    """Heavy-hitter eviction: dynamic budget ``ceil(fraction * n)`` plus a recent window."""

    budget_fraction: float
    window: int

    def __post_init__(self):
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValueError(f"budget_fraction must be in (0, 1], got {self.budget_fraction}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")

    def capacity(self, n_tokens: int) -> int:
        return min(n_tokens, score_capacity(self.budget_fraction, n_tokens, self.window))


HeadPolicy = Union[Full, Streaming, ScoreEvict]


@dataclass(frozen=True)
class CachePolicy:
    """Assignment of a :data:`HeadPolicy` to every (layer, kv-head)."""

    heads: tuple

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.heads)
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("CachePolicy needs a non-empty rectangular layer x head table")
        object.__setattr__(self, "heads", rows)

    @classmethod
    def uniform(cls, n_layers: int, n_kv_heads: int, head: HeadPolicy) -> "CachePolicy":
        return cls(tuple((head,) * n_kv_heads for _ in range(n_layers)))

    @classmethod
    def all_full(cls, n_layers: int, n_kv_heads: int) -> "CachePolicy":
        return cls.uniform(n_layers, n_kv_heads, Full())

    @property
    def n_layers(self) -> int:
        return len(self.heads)

    @property
    def n_kv_heads(self) -> int:
        return len(self.heads[0])

    def __getitem__(self, key) -> HeadPolicy:
        layer, head = key
        return self.heads[layer][head]

    def items(self) -> Iterator:
        for l, row in enumerate(self.heads):
            for h, p in enumerate(row):
                yield (l, h), p

    def full_heads(self) -> set:
        return {lh for lh, p in self.items() if isinstance(p, Full)}

    def is_all_full(self) -> bool:
        return all(isinstance(p, Full) for _, p in self.items())

    def describe(self) -> str:
        return "\n".join(" ".join(_short(p) for p in row) for row in self.heads)


def _short(p: HeadPolicy) -> str:
    if isinstance(p, Full):
        return "F"
    if isinstance(p, Streaming):
        return f"S{p.sink}+{p.local}"
    return f"E{p.budget_fraction:g}+{p.window}"


def streaming_visible_set(t: int, sink: int, local: int) -> list:
    """Positions a query at ``t`` can see under streaming attention."""
    if t < 0:
        raise ValueError("t must be >= 0")
    sinks = set(range(min(sink, t + 1)))
    recent = set(range(max(t - local + 1, 0), t + 1))
    return sorted(sinks | recent)


def kv_memory_bytes(policy: CachePolicy, seq_len: int, config, bytes_per_value: int = 4):
    """Bytes held by each head's K and V after ``seq_len`` tokens.

    Returns ``(total, per_head)`` where ``per_head`` is (L, H_kv) int64.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    per_head = np.zeros((policy.n_layers, policy.n_kv_heads), dtype=np.int64)
    for (l, h), p in policy.items():
        per_head[l, h] = p.capacity(seq_len) * 2 * config.head_dim * bytes_per_value
    return int(per_head.sum()), per_head


@dataclass
class HeadCacheState:
    """Kept positions (increasing) and their accumulated attention."""

    kept: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.kept) != len(self.scores):
            raise ValueError("kept and scores must align")
        if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
            raise ValueError("kept indices must be strictly increasing")


def score_evict_update(state: HeadCacheState, new_attention_row, t: int,
                       policy: ScoreEvict) -> HeadCacheState:
    """One heavy-hitter step: accumulate, insert ``t``, evict down to budget.

    ``new_attention_row`` scores the kept positions, optionally followed by
    one extra entry for ``t`` itself.  The victim is the lowest accumulated
    score outside the ``window`` most recent positions; ties go to the
    smallest position.
    """
    row = np.asarray(new_attention_row, dtype=np.float64).reshape(-1)
    n = len(state.kept)
    if row.shape[0] not in (n, n + 1):
        raise ValueError(f"attention row has {row.shape[0]} entries for {n} kept positions")
    if np.any(row < 0):
        raise ValueError("attention scores must be nonnegative")
    if state.kept and t <= state.kept[-1]:
        raise ValueError(f"position {t} is not after the last kept position {state.kept[-1]}")
    kept = list(state.kept) + [t]
    scores = [s + float(r) for s, r in zip(state.scores, row[:n])]
    scores.append(float(row[n]) if row.shape[0] == n + 1 else 0.0)
    cap = score_capacity(policy.budget_fraction, t + 1, policy.window)
    while len(kept) > cap:
        m = len(kept) - policy.window
        victim = int(np.argmin(scores[:m]))
        del kept[victim]
        del scores[victim]
    return HeadCacheState(kept, scores)
