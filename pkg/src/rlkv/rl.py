"""GRPO over the gating adapters with an L1 sparsity penalty.

Only the (n_layers, n_kv_heads) gate matrix is trained; model weights stay
frozen.  There is no KL term.  The penalty weight can follow the group's
mean reward (``adaptive_beta``), which switches the penalty off entirely
once rewards fall to the threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoding import generate
from .model import GatingAdapters, ModelConfig, token_logprobs
from .optim import AdamW
from .tasks import PAD, difficulty_bucket, verify_reward

logger = logging.getLogger(__name__)

SPARSE_ALPHA = 0.05


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    beta: float = 0.3
    reward_threshold: float = 0.5
    adapter_lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.017
    temperature: float = 1.0
    steps: int = 200
    queries_per_step: int = 8
    max_new: int = 64
    adaptive_beta: bool = True
    ratio_level: str = "token"
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.reward_threshold < 1.0:
            raise ValueError("reward_threshold must lie in [0, 1)")
        if self.adapter_lr <= 0 or self.temperature <= 0:
            raise ValueError("adapter_lr and temperature must be positive")
        if self.ratio_level not in ("token", "sequence"):
            raise ValueError("ratio_level must be 'token' or 'sequence'")
        if self.steps < 0 or self.queries_per_step < 1 or self.max_new < 1:
            raise ValueError("steps >= 0, queries_per_step >= 1 and max_new >= 1 required")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class RolloutGroup:
    query: list
    outputs: list
    old_logprobs: list
    rewards: np.ndarray
    advantages: np.ndarray
    instance: object = field(default=None, repr=False)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


def compute_advantages(rewards) -> np.ndarray:
    """Group-normalised rewards (population std); all zeros if std < 1e-6."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std < 1e-6:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def adaptive_beta(mean_reward: float, tau: float, beta: float) -> float:
    """Penalty weight: 0 up to ``tau``, then ``beta * (exp(r) - 1)``."""
    if mean_reward <= tau:
        return 0.0
    return beta * math.expm1(mean_reward)


def l1_term(alpha, beta_eff: float, n_layers: int | None = None, n_heads: int | None = None):
    """``beta_eff * sum|alpha| / (L * H)``; differentiable when ``alpha`` is a Tensor."""
    if beta_eff < 0:
        raise ValueError("beta_eff must be >= 0")
    if not isinstance(alpha, Tensor):
        alpha = Tensor(alpha.alpha if isinstance(alpha, GatingAdapters) else alpha)
    L, H = alpha.shape if n_layers is None else (n_layers, n_heads)
    return ad.scale(ad.tsum(ad.tabs(alpha)), beta_eff / (L * H))


def rollout_group(instance, weights: dict, config: ModelConfig, adapters: GatingAdapters,
                  gcfg: GrpoConfig, seed=0) -> RolloutGroup:
    """Sample ``group_size`` completions in mixed-attention mode and score them."""
    outs, lps, rewards = [], [], []
    for i in range(gcfg.group_size):
        gen = generate(instance.prompt, weights, config, adapters=adapters, max_new=gcfg.max_new,
                       temperature=gcfg.temperature, seed=[*np.atleast_1d(seed).tolist(), i])
        outs.append(gen.tokens)
        lps.append(np.asarray(gen.logprobs, dtype=np.float64))
        rewards.append(verify_reward(gen.tokens, instance))
    rewards = np.asarray(rewards)
    return RolloutGroup(instance.prompt, outs, lps, rewards, compute_advantages(rewards), instance)


def _pack(groups):
    rows = [(g.query, o, lp, a) for g in groups for o, lp, a in zip(g.outputs, g.old_logprobs, g.advantages)]
    T = max(len(q) + len(o) for q, o, _, _ in rows) - 1
    B = len(rows)
    inp = np.full((B, T), PAD, dtype=np.int64)
    tgt = np.full((B, T), PAD, dtype=np.int64)
    old = np.zeros((B, T), dtype=np.float64)
    mask = np.zeros((B, T), dtype=np.float64)
    adv = np.zeros(B, dtype=np.float64)
    for b, (q, o, lp, a) in enumerate(rows):
        seq = list(q) + list(o)
        n = len(seq) - 1
        inp[b, :n] = seq[:-1]
        tgt[b, :n] = seq[1:]
        start = len(q) - 1
        old[b, start:n] = lp
        mask[b, start:n] = 1.0
        adv[b] = a
    return inp, tgt, old, mask, adv


def grpo_objective(groups, alpha, weights: dict, config: ModelConfig, gcfg: GrpoConfig) -> Tensor:
    """Clipped-ratio reward term (to maximise), averaged over the given groups.

    Token mode averages clipped per-token ratios over each output, then over
    the group; sequence mode clips the product ratio of whole outputs.
    """
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    if not groups:
        raise ValueError("no rollout groups")
    if not isinstance(alpha, Tensor):
        alpha = Tensor(alpha.alpha if isinstance(alpha, GatingAdapters) else alpha)
    dt = alpha.data.dtype
    inp, tgt, old, mask, adv = _pack(groups)
    B, T = inp.shape
    n_groups = len(groups)
    per_row = np.repeat([1.0 / (len(g.outputs) * n_groups) for g in groups], [len(g.outputs) for g in groups])
    new = token_logprobs(inp, tgt, weights, config, adapters=alpha, mode="mixed",
                         temperature=gcfg.temperature)
    diff = ad.mul(ad.sub(new, Tensor(old.astype(dt))), Tensor(mask.astype(dt)))
    lo, hi = 1.0 - gcfg.clip_eps, 1.0 + gcfg.clip_eps
    if gcfg.ratio_level == "token":
        ratio = ad.exp(diff)
        A = Tensor(np.broadcast_to(adv[:, None], (B, T)).astype(dt))
        term = ad.minimum(ad.mul(ratio, A), ad.mul(ad.clip(ratio, lo, hi), A))
        lengths = np.maximum(mask.sum(axis=1), 1.0)
        w = mask * (per_row / lengths)[:, None]
        return ad.tsum(ad.mul(term, Tensor(w.astype(dt))))
    ratio = ad.exp(ad.tsum(diff, axis=1))
    A = Tensor(adv[:, None].astype(dt))
    term = ad.minimum(ad.mul(ratio, A), ad.mul(ad.clip(ratio, lo, hi), A))
    return ad.tsum(ad.mul(term, Tensor(per_row[:, None].astype(dt))))


def effective_beta(groups, gcfg: GrpoConfig) -> float:
    """Batch mean of the per-group penalty weight (constant ``beta`` if not adaptive)."""
    if not gcfg.adaptive_beta:
        return gcfg.beta
    return float(np.mean([adaptive_beta(g.mean_reward, gcfg.reward_threshold, gcfg.beta) for g in groups]))


def total_objective(groups, alpha, weights: dict, config: ModelConfig, gcfg: GrpoConfig,
                    beta_eff: float | None = None) -> Tensor:
    if beta_eff is None:
        beta_eff = effective_beta(groups, gcfg)
    return ad.sub(grpo_objective(groups, alpha, weights, config, gcfg), l1_term(alpha, beta_eff))


def make_adapter_optimizer(adapters: GatingAdapters, gcfg: GrpoConfig) -> AdamW:
    alpha = Tensor(adapters.alpha.copy(), requires_grad=True, name="alpha")
    return AdamW({"alpha": alpha}, gcfg.adapter_lr, gcfg.betas, weight_decay=gcfg.weight_decay)


def alpha_stats(alpha: np.ndarray) -> dict:
    return {"alpha_mean": float(np.mean(alpha)),
            "alpha_sparsity_frac": float(np.mean(alpha < SPARSE_ALPHA))}


def rl_step(groups, optimizer: AdamW, weights: dict, config: ModelConfig, gcfg: GrpoConfig):
    """One ascent step on ``grpo_objective - l1_term``; alpha is clamped to [0, 1] afterwards.

    Returns ``(adapters, metrics)``; alpha statistics in the metrics describe
    the adapters the rollouts were sampled with.
    """
    if not groups:
        raise ValueError("no rollout groups")
    alpha = optimizer.params["alpha"]
    stats = alpha_stats(alpha.data)
    beta_eff = effective_beta(groups, gcfg)
    obj = total_objective(groups, alpha, weights, config, gcfg, beta_eff)
    grads = ad.backward(ad.scale(obj, -1.0))
    optimizer.step({"alpha": grads.get(alpha.id)})
    np.clip(alpha.data, 0.0, 1.0, out=alpha.data)
    metrics = {"mean_reward": float(np.mean([r for g in groups for r in g.rewards])),
               **stats, "beta_eff": beta_eff, "objective": obj.item()}
    return GatingAdapters(alpha.data.copy()), metrics


def train_rl(curated, weights: dict, config: ModelConfig, gcfg: GrpoConfig,
             adapters: GatingAdapters | None = None, on_step=None) -> GatingAdapters:
    """Rollout / update loop over shuffled passes of ``curated``.

    ``on_step(step, metrics)`` is called once per update.
    """
    if not curated:
        raise ValueError("no curated training instances")
    adapters = adapters or GatingAdapters.constant(config, 1.0)
    opt = make_adapter_optimizer(adapters, gcfg)
    rng = np.random.default_rng([gcfg.seed, 101])
    order = []
    for step in range(gcfg.steps):
        batch = []
        while len(batch) < gcfg.queries_per_step:
            if not order:
                order = list(rng.permutation(len(curated)))
            batch.append(curated[order.pop(0)])
        groups = [rollout_group(inst, weights, config, adapters, gcfg, seed=[gcfg.seed, step, qi])
                  for qi, inst in enumerate(batch)]
        adapters, metrics = rl_step(groups, opt, weights, config, gcfg)
        if on_step is not None:
            on_step(step, metrics)
    return adapters


def _quotas(weights, target: int) -> np.ndarray:
    raw = np.asarray(weights, dtype=np.float64) * target
    q = np.floor(raw + 1e-9).astype(int)
    rem = target - q.sum()
    if rem > 0:
        order = np.argsort(-(raw - q), kind="stable")
        q[order[:rem]] += 1
    return q


def self_distill_filter(pool, weights: dict, config: ModelConfig, bucket_weights, target_count: int,
                        seed: int = 0, edges=None, max_new: int = 64):
    """Keep instances the frozen model solves greedily, resampled to bucket proportions.

    Returns ``(curated, info)``; ``info['warning']`` is set when fewer
    solvable instances than ``target_count`` exist.
    """
    if not pool:
        raise ValueError("empty pool")
    bw = np.asarray(bucket_weights, dtype=np.float64)
    if abs(bw.sum() - 1.0) > 1e-6 or np.any(bw < 0):
        raise ValueError("bucket weights must be nonnegative and sum to 1")
    n_buckets = len(bw)
    solvable = []
    for inst in pool:
        gen = generate(inst.prompt, weights, config, max_new=max_new, temperature=0.0)
        if verify_reward(gen.tokens, inst) == 1.0:
            solvable.append(inst)
    return curriculum_sample(solvable, bw, target_count, seed=seed, edges=edges,
                             n_pool=len(pool), n_buckets=n_buckets)


def curriculum_sample(solvable, bucket_weights, target_count: int, seed: int = 0, edges=None,
                      n_pool: int | None = None, n_buckets: int | None = None):
    """Bucketed sampling without replacement; shortfall is spread over other buckets."""
    bw = np.asarray(bucket_weights, dtype=np.float64)
    n_buckets = n_buckets or len(bw)
    by_bucket = [[] for _ in range(n_buckets)]
    for inst in solvable:
        b = inst.bucket if edges is None else difficulty_bucket(len(inst.gold_cot), edges)
        if b < n_buckets:
            by_bucket[b].append(inst)
    avail = np.array([len(b) for b in by_bucket])
    total = int(min(target_count, avail.sum()))
    quota = np.zeros(n_buckets, dtype=int)
    open_ = avail > 0
    left = total
    while left > 0 and open_.any():
        w = np.where(open_, bw, 0.0)
        if w.sum() <= 0:
            w = open_.astype(float)
        add = _quotas(w / w.sum(), left)
        quota += add
        over = np.maximum(quota - avail, 0)
        quota -= over
        left = int(over.sum())
        open_ = quota < avail
    rng = np.random.default_rng([seed, 7])
    curated = []
    for b, items in enumerate(by_bucket):
        if quota[b]:
            pick = rng.choice(len(items), size=int(quota[b]), replace=False)
            curated.extend(items[i] for i in sorted(pick))
    info = {"pool": n_pool if n_pool is not None else len(solvable), "solvable": len(solvable),
            "selected": len(curated), "bucket_counts": quota.tolist(),
            "warning": len(solvable) < target_count}
    if info["warning"]:
        logger.warning("only %d solvable instances for a target of %d", len(solvable), target_count)
    return curated, info
