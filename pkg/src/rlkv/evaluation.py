"""Greedy evaluation of a cache policy: accuracy, lengths, memory, error modes."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .decoding import generate
from .kvcache import CachePolicy, ScoreEvict, kv_memory_bytes
from .model import ModelConfig
from .tasks import ErrorMode, classify_error, verify_reward

FAILURE_MODES = (ErrorMode.REPETITIVE, ErrorMode.INCORRECT, ErrorMode.OVERLENGTH)


@dataclass
class EvalResult:
    accuracy: float
    mean_gen_len: float
    mean_total_len: float
    mean_bytes: float
    bytes_per_token: float
    full_bytes_per_token: float
    per_head_bytes: np.ndarray
    error_modes: dict
    n: int
    rewards: list = field(default_factory=list, repr=False)
    outputs: list = field(default_factory=list, repr=False)

    @property
    def memory_ratio(self) -> float:
        return self.bytes_per_token / self.full_bytes_per_token

    def error_shares(self) -> dict:
        return {m.value: self.error_modes.get(m.value, 0) / self.n for m in ErrorMode}


def evaluate(policy: CachePolicy | None, dataset, weights: dict, config: ModelConfig, max_new: int = 64,
             adapters=None, bytes_per_value: int = 4) -> EvalResult:
    """Greedy-decode every instance under ``policy`` (or mixed gates via ``adapters``)."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    L, H = config.n_layers, config.n_kv_heads
    if policy is None:
        policy = CachePolicy.all_full(L, H)
    full = CachePolicy.all_full(L, H)
    rewards, outputs, modes = [], [], Counter()
    gen_lens, total_lens, bytes_, full_bytes = [], [], [], []
    per_head = np.zeros((L, H), dtype=np.float64)
    for inst in dataset:
        gen = generate(inst.prompt, weights, config, adapters=adapters,
                       policy=None if adapters is not None else policy, max_new=max_new, temperature=0.0)
        r = verify_reward(gen.tokens, inst)
        rewards.append(r)
        outputs.append(gen.tokens)
        modes[classify_error(gen.tokens, inst, max_new).value] += 1
        n = gen.total_len
        total, heads = kv_memory_bytes(policy, n, config, bytes_per_value)
        per_head += heads
        bytes_.append(total)
        full_bytes.append(kv_memory_bytes(full, n, config, bytes_per_value)[0])
        gen_lens.append(len(gen.tokens))
        total_lens.append(n)
    n_inst = len(dataset)
    tok = float(np.sum(total_lens))
    return EvalResult(
        accuracy=float(np.mean(rewards)),
        mean_gen_len=float(np.mean(gen_lens)),
        mean_total_len=float(np.mean(total_lens)),
        mean_bytes=float(np.mean(bytes_)),
        bytes_per_token=float(np.sum(bytes_)) / tok,
        full_bytes_per_token=float(np.sum(full_bytes)) / tok,
        per_head_bytes=per_head / n_inst,
        error_modes=dict(modes),
        n=n_inst,
        rewards=rewards,
        outputs=outputs,
    )


def matched_score_evict(sparsity: float, sink: int, local: int) -> ScoreEvict:
    """Heavy-hitter policy whose memory matches a head-level policy at ``sparsity``.

    A head-level policy keeps about ``(1 - s) * n + s * (sink + local)``
    tokens per head; a score-evict head keeps ``ceil((1 - s) * n) + window``.
    """
    frac = max(1.0 - sparsity, 1e-6)
    window = max(1, int(round(sparsity * (sink + local))))
    return ScoreEvict(min(frac, 1.0), window)
