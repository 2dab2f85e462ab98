"""End-to-end stages: data, SFT, self-distillation, RL, ranking, evaluation, reports.

Every stage reads only files written by earlier stages plus the config,
seeds its own generator from ``(config.seed, stage index)`` and drops a
marker in ``stages/`` when done.  A rerun skips stages whose marker and
outputs exist.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import heads
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, save_config
from .evaluation import EvalResult, evaluate, matched_score_evict
from .kvcache import CachePolicy
from .metrics import MetricsWriter, read_metrics
from .model import GatingAdapters, freeze, init_weights, weights_from_arrays
from .rl import curriculum_sample, self_distill_filter, train_rl
from .sft import train_sft
from .tasks import ErrorMode, gen_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "sft", "distill", "rl", "rank", "eval", "importance-study", "baseline-eval", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return 10 + STAGES.index(self.stage)


@dataclass
class Paths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def ckpt(self) -> Path:
        return self.root / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def rankings(self) -> Path:
        return self.root / "rankings"

    @property
    def stages(self) -> Path:
        return self.root / "stages"

    def marker(self, stage: str) -> Path:
        return self.stages / f"{stage}.done"


def stage_seed(cfg: ExperimentConfig, stage: str) -> list:
    return [cfg.seed, STAGES.index(stage)]


def _write_csv(path: Path, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(x: float) -> str:
    return repr(float(x))


def _row(method: str, sparsity: float, res: EvalResult, **extra) -> dict:
    row = {"method": method, "sparsity": _fmt(sparsity), **{k: str(v) for k, v in extra.items()},
           "accuracy": _fmt(res.accuracy), "mean_gen_len": _fmt(res.mean_gen_len),
           "bytes_per_token": _fmt(res.bytes_per_token), "memory_ratio": _fmt(res.memory_ratio)}
    for mode, share in res.error_shares().items():
        row[f"share_{mode}"] = _fmt(share)
    return row


def _mean_rows(method: str, sparsity: float, results: list, **extra) -> dict:
    keys = ("accuracy", "mean_gen_len", "bytes_per_token", "memory_ratio")
    rows = [_row(method, sparsity, r) for r in results]
    out = {"method": method, "sparsity": _fmt(sparsity), **{k: str(v) for k, v in extra.items()}}
    for k in list(rows[0]):
        if k in keys or k.startswith("share_"):
            out[k] = _fmt(np.mean([float(r[k]) for r in rows]))
    return out


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, force: bool = False):
        self.cfg = cfg
        self.paths = Paths(out_dir or cfg.output_dir)
        self.force = force

    # -- helpers -----------------------------------------------------------
    def _load_model(self, name: str):
        ck = load_checkpoint(self.paths.ckpt / f"{name}.ckpt")
        return ck, freeze(weights_from_arrays(ck.tensors))

    def _dataset(self, name: str) -> list:
        return load_dataset(self.paths.data / f"{name}.jsonl")

    def _ranking(self, name: str = "ranking") -> list:
        return heads.parse_ranking((self.paths.rankings / f"{name}.txt").read_text())

    def done(self, stage: str) -> bool:
        return self.paths.marker(stage).exists()

    def run_stage(self, stage: str) -> bool:
        """Run one stage unless already complete; returns True when it ran."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if self.done(stage) and not self.force:
            logger.info("stage %s already complete, skipping", stage)
            return False
        self.paths.root.mkdir(parents=True, exist_ok=True)
        save_config(self.paths.root / "config.json", self.cfg)
        started = time.monotonic()
        try:
            getattr(self, "stage_" + stage.replace("-", "_"))()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.paths.stages.mkdir(parents=True, exist_ok=True)
        self.paths.marker(stage).write_text(json.dumps({"config_hash": self.cfg.config_hash()}) + "\n")
        logger.info("stage %s finished in %.1fs", stage, time.monotonic() - started)
        return True

    def run(self, stages=STAGES) -> None:
        for stage in stages:
            self.run_stage(stage)

    # -- stages ------------------------------------------------------------
    def stage_gen_data(self):
        t = self.cfg.tasks
        base = int(np.random.default_rng(stage_seed(self.cfg, "gen-data")).integers(0, 2**31 - 1))
        specs = {
            "sft_train": (t.sft_train_size, t.sft_min_steps, t.sft_max_steps),
            "heldout": (t.heldout_size, t.heldout_min_steps, t.heldout_max_steps),
            "pool": (t.pool_size, t.pool_min_steps, t.pool_max_steps),
            "eval": (t.eval_size, t.eval_min_steps, t.eval_max_steps),
        }
        for i, (name, (n, lo, hi)) in enumerate(specs.items()):
            data = gen_dataset(base + i, n, lo, hi, t.value_modulus, t.bucket_edges)
            save_dataset(self.paths.data / f"{name}.jsonl", data)

    def stage_sft(self):
        cfg = self.cfg
        train = self._dataset("sft_train")
        seed = int(np.random.default_rng(stage_seed(cfg, "sft")).integers(0, 2**31 - 1))
        weights = init_weights(cfg.model, seed=seed)
        path = self.paths.metrics / "sft.jsonl"
        path.unlink(missing_ok=True)
        writer = MetricsWriter(path)
        t0 = time.monotonic()

        def log(step, epoch, loss):
            writer.emit("sft", {"step": step, "epoch": epoch, "loss": loss,
                                "wall_clock_ms": (time.monotonic() - t0) * 1000.0})

        train_sft(train, weights, cfg.model, replace(cfg.sft, seed=seed), on_step=log)
        save_checkpoint(self.paths.ckpt / "sft.ckpt",
                        Checkpoint(cfg.model, weights, None,
                                   {"stage": "sft", "steps": len(read_metrics(path)),
                                    "config_hash": cfg.config_hash()}))

    def stage_distill(self):
        cfg = self.cfg
        _, weights = self._load_model("sft")
        pool = self._dataset("pool")
        curated, info = self_distill_filter(pool, weights, cfg.model, cfg.tasks.bucket_weights,
                                            cfg.tasks.curated_size, seed=cfg.seed,
                                            edges=cfg.tasks.bucket_edges, max_new=cfg.grpo.max_new)
        if not curated:
            # nothing solvable: RL would see zero reward everywhere, so train
            # on the raw pool rather than stall the pipeline
            logger.warning("no solvable pool instances; curating from the unfiltered pool")
            curated, fb = curriculum_sample(pool, cfg.tasks.bucket_weights, cfg.tasks.curated_size,
                                            seed=cfg.seed, edges=cfg.tasks.bucket_edges)
            info["fallback_selected"] = fb["selected"]
        save_dataset(self.paths.data / "curated.jsonl", curated)
        (self.paths.data / "distill.json").write_text(json.dumps(info, indent=2) + "\n")

    def _rl_run(self, name: str, gcfg, weights, heldout, eval_set) -> dict:
        cfg = self.cfg
        curated = self._dataset("curated")
        path = self.paths.metrics / f"{name}.jsonl"
        path.unlink(missing_ok=True)
        writer = MetricsWriter(path)
        t0 = time.monotonic()

        def log(step, m):
            writer.emit(name, {"step": step, **m, "wall_clock_ms": (time.monotonic() - t0) * 1000.0})

        adapters = train_rl(curated, weights, cfg.model, gcfg, GatingAdapters.constant(cfg.model, 1.0), log)
        save_checkpoint(self.paths.ckpt / f"{name}.ckpt",
                        Checkpoint(cfg.model, weights, adapters,
                                   {"stage": name, "steps": gcfg.steps, "config_hash": cfg.config_hash()}))
        recs = read_metrics(path)
        tail = max(1, len(recs) // 5)
        full = evaluate(None, heldout, weights, cfg.model, cfg.deploy.max_new)
        mixed = evaluate(None, eval_set, weights, cfg.model, cfg.deploy.max_new, adapters=adapters)
        return {"final_mean_reward": float(np.mean([r["mean_reward"] for r in recs[-tail:]])) if recs else 0.0,
                "alpha_mean": float(adapters.alpha.mean()),
                "alpha_sparsity_frac": float(np.mean(adapters.alpha < 0.05)),
                "heldout_full_accuracy": full.accuracy,
                "mixed_accuracy": mixed.accuracy}

    def stage_rl(self):
        cfg = self.cfg
        ck, weights = self._load_model("sft")
        heldout = self._dataset("heldout")
        eval_set = self._dataset("eval")
        pre = evaluate(None, heldout, weights, cfg.model, cfg.deploy.max_new)
        pre_eval = evaluate(None, eval_set, weights, cfg.model, cfg.deploy.max_new)
        summary = {"pre_rl_heldout_accuracy": pre.accuracy, "pre_rl_eval_accuracy": pre_eval.accuracy}
        summary["adaptive"] = self._rl_run("rl", cfg.grpo, weights, heldout, eval_set)
        if cfg.baselines.constant_beta:
            summary["constant_beta"] = self._rl_run("rl_constant_beta", replace(cfg.grpo, adaptive_beta=False),
                                                    weights, heldout, eval_set)
        self.paths.reports.mkdir(parents=True, exist_ok=True)
        (self.paths.reports / "rl_summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    def stage_rank(self):
        self.paths.rankings.mkdir(parents=True, exist_ok=True)
        names = ["rl"] + (["rl_constant_beta"] if self.cfg.baselines.constant_beta else [])
        for name in names:
            ck = load_checkpoint(self.paths.ckpt / f"{name}.ckpt")
            out = "ranking" if name == "rl" else f"ranking_{name}"
            (self.paths.rankings / f"{out}.txt").write_text(heads.format_ranking(heads.rank_heads(ck.adapters)))

    def stage_eval(self):
        cfg = self.cfg
        _, weights = self._load_model("sft")
        eval_set = self._dataset("eval")
        d = cfg.deploy
        rows = []
        rankings = {"rlkv": self._ranking()}
        if cfg.baselines.constant_beta:
            rankings["rlkv_constant_beta"] = self._ranking("ranking_rl_constant_beta")
        for method, ranking in rankings.items():
            for s in cfg.sparsity_grid:
                pol = heads.policy_for_sparsity(ranking, s, d.sink, d.local)
                rows.append(_row(method, s, evaluate(pol, eval_set, weights, cfg.model, d.max_new)))
        _write_csv(self.paths.reports / "eval.csv", rows)

    def stage_importance_study(self):
        cfg = self.cfg
        _, weights = self._load_model("sft")
        eval_set = self._dataset("eval")
        ranking = self._ranking()
        d, m = cfg.deploy, cfg.model
        rng = np.random.default_rng(stage_seed(cfg, "importance-study"))
        seeds = rng.integers(0, 2**31 - 1, size=cfg.baselines.random_seeds).tolist()
        rows = []
        for f in cfg.importance_fractions:
            top = evaluate(heads.mask_top_heads(ranking, f, d.sink, d.local), eval_set, weights, m, d.max_new)
            rows.append(_row("mask_top", f, top, seed=""))
            rand = [evaluate(heads.random_policy(f, m.n_layers, m.n_kv_heads, d.sink, d.local, sd),
                             eval_set, weights, m, d.max_new) for sd in seeds]
            for sd, r in zip(seeds, rand):
                rows.append(_row("mask_random", f, r, seed=sd))
            rows.append(_mean_rows("mask_random_mean", f, rand, seed=""))
        _write_csv(self.paths.reports / "importance.csv", rows)

    def stage_baseline_eval(self):
        cfg = self.cfg
        _, weights = self._load_model("sft")
        eval_set = self._dataset("eval")
        d, m = cfg.deploy, cfg.model
        rng = np.random.default_rng(stage_seed(cfg, "baseline-eval"))
        seeds = rng.integers(0, 2**31 - 1, size=cfg.baselines.random_seeds).tolist()
        rows = []
        for s in cfg.sparsity_grid:
            if cfg.baselines.random:
                rand = [evaluate(heads.random_policy(s, m.n_layers, m.n_kv_heads, d.sink, d.local, sd),
                                 eval_set, weights, m, d.max_new) for sd in seeds]
                rows.append(_mean_rows("random", s, rand))
            if cfg.baselines.score_evict and s > 0:
                pol = CachePolicy.uniform(m.n_layers, m.n_kv_heads, matched_score_evict(s, d.sink, d.local))
                rows.append(_row("score_evict", s, evaluate(pol, eval_set, weights, m, d.max_new)))
        _write_csv(self.paths.reports / "baselines.csv", rows)

    def stage_report(self):
        rep = self.paths.reports
        rows = []
        for name in ("eval", "baselines"):
            p = rep / f"{name}.csv"
            if p.exists():
                rows += _read_csv(p)
        cols = ["method", "sparsity", "accuracy", "mean_gen_len", "bytes_per_token", "memory_ratio"] + \
               [f"share_{m.value}" for m in ErrorMode]
        _write_csv(rep / "summary.csv", [{c: r.get(c, "") for c in cols} for r in rows])
        _write_csv(rep / "sweep.csv", [{"method": r["method"], "sparsity": r["sparsity"],
                                        "accuracy": r["accuracy"]} for r in rows])
        curves = []
        for name in ("rl", "rl_constant_beta"):
            p = self.paths.metrics / f"{name}.jsonl"
            if p.exists():
                curves += [{"run": name, **{k: v for k, v in r.items() if k != "stage"}} for r in read_metrics(p)]
        _write_csv(rep / "training_curves.csv", curves)


def run_pipeline(config_path, out_dir=None, force: bool = False, stages=STAGES) -> Path:
    from .config import load_config

    cfg = load_config(config_path)
    pipe = Pipeline(cfg, out_dir, force=force)
    pipe.run(stages)
    return pipe.paths.root
