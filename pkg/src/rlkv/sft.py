"""Supervised fine-tuning on rendered (question, solution) pairs."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .decoding import generate
from .model import ModelConfig, forward_logits
from .optim import AdamW
from .tasks import PAD, verify_reward


@dataclass(frozen=True)
class SftConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 1
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.017
    seed: int = 0
    schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in (0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def make_batch(instances):
    """Right-padded inputs, next-token targets and a loss mask over solution tokens."""
    seqs = [inst.sequence for inst in instances]
    T = max(len(s) for s in seqs) - 1
    inp = np.full((len(seqs), T), PAD, dtype=np.int64)
    tgt = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float32)
    for b, (inst, s) in enumerate(zip(instances, seqs)):
        n = len(s) - 1
        inp[b, :n] = s[:-1]
        tgt[b, :n] = s[1:]
        mask[b, len(inst.question) - 1:n] = 1.0
    return inp, tgt, mask


def sft_loss(instances, weights: dict, config: ModelConfig) -> ad.Tensor:
    inp, tgt, mask = make_batch(instances)
    logits = forward_logits(inp, weights, config)
    B, T = inp.shape
    return ad.cross_entropy(ad.reshape(logits, (B * T, config.vocab_size)), tgt.reshape(-1),
                            weights=mask.reshape(-1))


def _decay_filter(name, t):
    return t.ndim == 2 and name != "tok_emb"


def lr_at(step: int, total: int, cfg: SftConfig) -> float:
    """Linear warmup, then constant or cosine decay to 10% of the peak."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.learning_rate
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.learning_rate * (0.1 + 0.45 * (1.0 + math.cos(math.pi * min(frac, 1.0))))


def make_optimizer(weights: dict, cfg: SftConfig) -> AdamW:
    return AdamW(weights, cfg.learning_rate, cfg.betas, weight_decay=cfg.weight_decay,
                 decay_filter=_decay_filter)


def sft_step(instances, weights: dict, config: ModelConfig, optimizer: AdamW) -> float:
    """One AdamW update on the masked next-token loss; returns the loss."""
    if not instances:
        raise ValueError("empty batch")
    loss = sft_loss(instances, weights, config)
    grads = ad.backward(loss)
    optimizer.step({name: grads.get(t.id) for name, t in weights.items()})
    return loss.item()


def train_sft(train, weights: dict, config: ModelConfig, cfg: SftConfig, on_step=None,
              max_seconds: float | None = None) -> list:
    """Run ``cfg.epochs`` shuffled epochs; returns the per-step losses.

    ``on_step(step, epoch, loss)`` is called after every update.
    """
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(weights, cfg)
    losses = []
    started = time.monotonic()
    step = 0
    total = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[i:i + cfg.batch_size]]
            opt.lr = lr_at(step, total, cfg)
            loss = sft_step(batch, weights, config, opt)
            losses.append(loss)
            if on_step is not None:
                on_step(step, epoch, loss)
            step += 1
            if max_seconds is not None and time.monotonic() - started > max_seconds:
                return losses
    return losses


def eval_exact_match(dataset, weights: dict, config: ModelConfig, max_new: int = 64, policy=None) -> float:
    """Share of instances whose greedy decode earns reward 1."""
    if not dataset:
        raise ValueError("cannot score an empty dataset")
    hits = 0.0
    for inst in dataset:
        gen = generate(inst.prompt, weights, config, policy=policy, max_new=max_new, temperature=0.0)
        hits += verify_reward(gen.tokens, inst)
    return hits / len(dataset)
