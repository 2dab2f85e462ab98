"""Experiment configuration: a JSON file with a strict schema.

Unknown keys anywhere are rejected so that a config file fully documents
the run it produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import ModelConfig
from .rl import GrpoConfig
from .sft import SftConfig
from .tasks import DEFAULT_BUCKET_EDGES, DEFAULT_BUCKET_WEIGHTS

# compressed-head cache sizes used by the paper-scale models; the toy
# defaults below shrink them with the context length
PAPER_TRAIN_SINK, PAPER_TRAIN_LOCAL = 128, 256
PAPER_DEPLOY_SINK, PAPER_DEPLOY_LOCAL = 16, 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    value_modulus: int = 10
    sft_train_size: int = 72000
    sft_min_steps: int = 1
    sft_max_steps: int = 8
    heldout_size: int = 200
    heldout_min_steps: int = 1
    heldout_max_steps: int = 3
    pool_size: int = 600
    pool_min_steps: int = 2
    pool_max_steps: int = 8
    curated_size: int = 300
    eval_size: int = 200
    eval_min_steps: int = 4
    eval_max_steps: int = 8
    bucket_edges: tuple = DEFAULT_BUCKET_EDGES
    bucket_weights: tuple = DEFAULT_BUCKET_WEIGHTS

    def __post_init__(self):
        if self.value_modulus < 2:
            raise ValueError("value_modulus must be >= 2")
        for lo, hi in [(self.sft_min_steps, self.sft_max_steps), (self.heldout_min_steps, self.heldout_max_steps),
                       (self.pool_min_steps, self.pool_max_steps), (self.eval_min_steps, self.eval_max_steps)]:
            if not 1 <= lo <= hi:
                raise ValueError(f"step range [{lo}, {hi}] is invalid")
        edges = tuple(int(e) for e in self.bucket_edges)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bucket_edges must be strictly ascending")
        weights = tuple(float(w) for w in self.bucket_weights)
        if len(weights) != len(edges) or abs(sum(weights) - 1.0) > 1e-6:
            raise ValueError("bucket_weights must match bucket_edges and sum to 1")
        object.__setattr__(self, "bucket_edges", edges)
        object.__setattr__(self, "bucket_weights", weights)


@dataclass(frozen=True)
class DeployConfig:
    sink: int = 4
    local: int = 8
    max_new: int = 64

    def __post_init__(self):
        if self.sink < 1 or self.local < 1 or self.max_new < 1:
            raise ValueError("deploy sink, local and max_new must be >= 1")


@dataclass(frozen=True)
class BaselineConfig:
    random: bool = True
    score_evict: bool = True
    constant_beta: bool = True
    random_seeds: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    deploy: DeployConfig = field(default_factory=DeployConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    sparsity_grid: tuple = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)
    importance_fractions: tuple = (0.0, 0.125, 0.25, 0.5)

    def __post_init__(self):
        grid = tuple(float(s) for s in self.sparsity_grid)
        fracs = tuple(float(s) for s in self.importance_fractions)
        if any(not 0.0 <= s <= 1.0 for s in grid + fracs):
            raise ValueError("sparsity grid and masking fractions must lie in [0, 1]")
        object.__setattr__(self, "sparsity_grid", grid)
        object.__setattr__(self, "importance_fractions", fracs)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_NESTED = {"model": ModelConfig, "sft": SftConfig, "grpo": GrpoConfig, "tasks": TaskConfig,
           "deploy": DeployConfig, "baselines": BaselineConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, val in data.items():
        if where == "config" and key in _NESTED:
            val = _build(_NESTED[key], val, key)
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
