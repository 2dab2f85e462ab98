"""JSON-lines metrics streams with per-stage schemas."""

from __future__ import annotations

import json
import math
import threading
from pathlib import Path

SCHEMAS = {
    "rl": ("stage", "step", "mean_reward", "alpha_mean", "alpha_sparsity_frac", "beta_eff",
           "objective", "wall_clock_ms"),
    "sft": ("stage", "step", "epoch", "loss", "wall_clock_ms"),
}
# fields that legitimately differ between otherwise identical runs
NONDETERMINISTIC_FIELDS = ("wall_clock_ms",)


class SchemaError(ValueError):
    pass


def schema_for(stage: str) -> tuple:
    return SCHEMAS["rl" if stage.startswith("rl") else stage]


def validate(stage: str, record: dict) -> dict:
    try:
        fields = schema_for(stage)
    except KeyError:
        raise SchemaError(f"no metrics schema for stage {stage!r}") from None
    rec = {"stage": stage, **record}
    if set(rec) != set(fields):
        missing = sorted(set(fields) - set(rec))
        extra = sorted(set(rec) - set(fields))
        raise SchemaError(f"{stage} record: missing={missing} unexpected={extra}")
    for key in fields[1:]:
        val = rec[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise SchemaError(f"{stage} record: {key}={val!r} is not a finite number")
    if "alpha_sparsity_frac" in rec and not 0.0 <= rec["alpha_sparsity_frac"] <= 1.0:
        raise SchemaError(f"alpha_sparsity_frac={rec['alpha_sparsity_frac']} outside [0, 1]")
    return {k: rec[k] for k in fields}


class MetricsWriter:
    """Append-only writer; ``emit`` calls are serialised."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def emit(self, stage: str, record: dict) -> None:
        line = json.dumps(validate(stage, record), separators=(",", ":"))
        with self._lock, open(self.path, "a") as fh:
            fh.write(line + "\n")


def emit_metrics(path, stage: str, record: dict) -> None:
    MetricsWriter(path).emit(stage, record)


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_nondeterministic(records) -> list:
    return [{k: v for k, v in r.items() if k not in NONDETERMINISTIC_FIELDS} for r in records]
