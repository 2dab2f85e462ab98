"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 5-8 share one trained artifact: the default config run through the
whole pipeline.  It is cached under ``RLKV_ACCEPTANCE_DIR`` (default
``.acceptance/`` in the repo) keyed by config hash, so a rerun reuses it.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from rlkv import autodiff as ad
from rlkv.checkpoint import load_checkpoint
from rlkv.config import ExperimentConfig, config_from_dict
from rlkv.evaluation import FAILURE_MODES, evaluate
from rlkv.heads import parse_ranking, policy_for_sparsity
from rlkv.kvcache import CachePolicy, Streaming, kv_memory_bytes
from rlkv.metrics import read_metrics, strip_nondeterministic
from rlkv.model import (GatingAdapters, ModelConfig, attention_head, init_weights, mixed_attention,
                        weights_from_arrays)
from rlkv.pipeline import Pipeline
from rlkv.rl import GrpoConfig, adaptive_beta, compute_advantages, rollout_group, total_objective
from rlkv.tasks import ErrorMode, gen_dataset, gen_instance

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def artifact():
    cfg = ExperimentConfig()
    base = Path(os.environ.get("RLKV_ACCEPTANCE_DIR", ROOT / ".acceptance"))
    pipe = Pipeline(cfg, base / cfg.config_hash())
    started = time.monotonic()
    pipe.run()
    print(f"acceptance artifact ready in {time.monotonic() - started:.0f}s at {pipe.paths.root}")
    return pipe


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pick(rows, method, sparsity):
    hits = [r for r in rows if r["method"] == method and math.isclose(float(r["sparsity"]), sparsity)]
    assert len(hits) == 1, (method, sparsity)
    return float(hits[0]["accuracy"])


# -- 1 ---------------------------------------------------------------------

def test_c01_gradient_matches_finite_differences(report):
    started = time.monotonic()
    cfg = ModelConfig(n_layers=2, n_query_heads=4, n_kv_heads=2, head_dim=8, max_seq_len=64,
                      sink_train=2, local_train=4)
    gcfg = GrpoConfig(group_size=4, max_new=16)
    arrays = {k: t.data for k, t in init_weights(cfg, seed=1, requires_grad=False).items()}
    for k in arrays:
        if k.endswith(("wq", "wk")):
            arrays[k] = arrays[k] * 10  # sharper attention, larger gate gradients
    alpha0 = np.array([[0.3, 0.7], [0.55, 0.45]])
    beta_eff = 0.05
    with ad.default_dtype(np.float64):
        w = weights_from_arrays(arrays)
        group = rollout_group(gen_instance(4, 3), w, cfg, GatingAdapters(alpha0), gcfg, seed=2)
        # fixed group with a mix of rewards so the reward term is nonzero
        group.rewards = np.array([1.0, 0.0, 0.0, 1.0])
        group.advantages = compute_advantages(group.rewards)
        alpha = ad.Tensor(alpha0, requires_grad=True)
        grad = ad.backward(total_objective([group], alpha, w, cfg, gcfg, beta_eff))[alpha.id]

        def f(a):
            return total_objective([group], ad.Tensor(a), w, cfg, gcfg, beta_eff).item()

        fd = ad.finite_diff_grad(f, alpha0, step=1e-3)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-12)
    elapsed = time.monotonic() - started
    report(1, rel.max() <= 1e-3 and elapsed < 60,
           f"max entrywise rel err {rel.max():.2e} (tol 1e-3), |grad| in [{np.abs(grad).min():.2e}, "
           f"{np.abs(grad).max():.2e}], {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------

def test_c02_mixed_attention_endpoints(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 40))
        hd = int(rng.choice([4, 8, 16]))
        sink, local = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        q, k, v = (ad.Tensor(rng.standard_normal((T, hd))) for _ in range(3))
        causal = np.tril(np.ones((T, T), dtype=bool))
        j, i = np.meshgrid(np.arange(T), np.arange(T))
        stream_mask = causal & ((j < sink) | (j > i - local))
        full = attention_head(q, k, v, causal).data
        stream = attention_head(q, k, v, stream_mask).data
        worst = max(worst, np.abs(mixed_attention(q, k, v, 1.0, sink, local).data - full).max(),
                    np.abs(mixed_attention(q, k, v, 0.0, sink, local).data - stream).max())
    report(2, worst <= 1e-6, f"max |diff| {worst:.2e} over 100 inputs (tol 1e-6)")


# -- 3 ---------------------------------------------------------------------

def test_c03_adaptive_beta_values(report):
    got = [adaptive_beta(r, 0.5, 0.001) for r in (0.4, 0.7, 1.0)]
    want = [0.0, 1.01375e-3, 1.71828e-3]
    ok = got[0] == 0.0 and all(abs(g - w) <= 1e-8 for g, w in zip(got[1:], want[1:]))
    report(3, ok, f"values {got}")


# -- 4 ---------------------------------------------------------------------

def test_c04_advantage_properties(report):
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    degenerate = bad_degenerate = 0
    for _ in range(10_000):
        n = int(rng.integers(2, 17))
        kind = rng.integers(0, 3)
        if kind == 0:
            r = rng.integers(0, 2, n).astype(float)
        elif kind == 1:
            r = rng.random(n)
        else:
            r = np.full(n, float(rng.integers(0, 2)))
        a = compute_advantages(r)
        if np.std(r) < 1e-6:
            degenerate += 1
            bad_degenerate += int(np.any(a != 0))
        else:
            worst_mean = max(worst_mean, abs(a.mean()))
            worst_std = max(worst_std, abs(a.std() - 1))
    ok = worst_mean <= 1e-6 and worst_std <= 1e-6 and bad_degenerate == 0 and degenerate > 0
    report(4, ok, f"max|mean| {worst_mean:.1e}, max|std-1| {worst_std:.1e}, "
                  f"{degenerate} degenerate lists, {bad_degenerate} nonzero")


# -- 5 ---------------------------------------------------------------------

def test_c05_sft_competence(artifact, report):
    sft = read_metrics(artifact.paths.metrics / "sft.jsonl")
    seconds = sft[-1]["wall_clock_ms"] / 1000.0
    acc = json.loads((artifact.paths.reports / "rl_summary.json").read_text())["pre_rl_heldout_accuracy"]
    report(5, acc >= 0.95 and seconds <= 15 * 60,
           f"held-out 1-3 step accuracy {acc:.3f} (need >= 0.95) after {seconds:.0f}s of training "
           f"(budget 900s, {len(sft)} steps)")


# -- 6 ---------------------------------------------------------------------

def test_c06_sparsification_without_collapse(artifact, report):
    s = json.loads((artifact.paths.reports / "rl_summary.json").read_text())
    ad_, const = s["adaptive"], s["constant_beta"]
    sparse_ok = ad_["alpha_sparsity_frac"] >= 0.30
    held_ok = abs(ad_["heldout_full_accuracy"] - s["pre_rl_heldout_accuracy"]) <= 0.02
    stab_ok = (const["final_mean_reward"] < ad_["final_mean_reward"]
               or const["mixed_accuracy"] < ad_["mixed_accuracy"])
    report(6, sparse_ok and held_ok and stab_ok,
           f"adaptive: {ad_['alpha_sparsity_frac']:.0%} of alpha < 0.05, full-policy held-out "
           f"{ad_['heldout_full_accuracy']:.3f} vs pre-RL {s['pre_rl_heldout_accuracy']:.3f}; "
           f"final reward adaptive {ad_['final_mean_reward']:.3f} vs constant {const['final_mean_reward']:.3f}, "
           f"mixed accuracy adaptive {ad_['mixed_accuracy']:.3f} vs constant {const['mixed_accuracy']:.3f}")


# -- 7 ---------------------------------------------------------------------

def test_c07_head_importance_asymmetry(artifact, report):
    rows = _csv(artifact.paths.reports / "importance.csv")
    top = _pick(rows, "mask_top", 0.25)
    rand = _pick(rows, "mask_random_mean", 0.25)
    margin = rand - top
    report(7, margin > 0, f"masking 25%: top-ranked {top:.3f}, random (5 seeds) {rand:.3f}, margin {margin:+.3f}")


# -- 8 ---------------------------------------------------------------------

def test_c08_deployment_dominance(artifact, report):
    ev = _csv(artifact.paths.reports / "eval.csv")
    base = _csv(artifact.paths.reports / "baselines.csv")
    ours = _pick(ev, "rlkv", 0.5)
    rand = _pick(base, "random", 0.5)
    h2o = _pick(base, "score_evict", 0.5)
    report(8, ours >= rand and ours >= h2o,
           f"sparsity 0.5 accuracy: learned {ours:.3f}, random {rand:.3f}, score-evict {h2o:.3f}")


# -- 9 ---------------------------------------------------------------------

def test_c09_memory_accounting(report):
    cfg = ModelConfig(n_layers=2, n_query_heads=2, n_kv_heads=2, head_dim=8, max_seq_len=1200,
                      sink_train=16, local_train=64)
    pol = CachePolicy.uniform(2, 2, Streaming(16, 64))
    _, per_head = kv_memory_bytes(pol, 1000, cfg, bytes_per_value=4)
    totals = {kv_memory_bytes(pol, n, cfg)[0] for n in range(80, 1200)}
    ok = bool(np.all(per_head == 5120)) and len(totals) == 1
    report(9, ok, f"per-head bytes {sorted(set(per_head.ravel().tolist()))}, "
                  f"distinct totals for seq_len 80..1199: {sorted(totals)}")


# -- 10 --------------------------------------------------------------------

DET_CONFIG = {
    "seed": 11,
    "model": {"n_layers": 2, "n_query_heads": 4, "n_kv_heads": 2, "head_dim": 8, "max_seq_len": 128},
    "sft": {"batch_size": 16, "epochs": 1, "learning_rate": 0.001},
    "grpo": {"steps": 4, "queries_per_step": 2, "max_new": 40},
    "tasks": {"sft_train_size": 96, "heldout_size": 6, "pool_size": 12, "curated_size": 6, "eval_size": 6},
    "deploy": {"max_new": 40},
    "baselines": {"random_seeds": 2},
    "sparsity_grid": [0.0, 0.5, 1.0],
    "importance_fractions": [0.0, 0.25],
}


def test_c10_determinism(tmp_path, report):
    cfg = config_from_dict(DET_CONFIG)
    runs = []
    for i in range(2):
        pipe = Pipeline(cfg, tmp_path / f"run{i}")
        pipe.run()
        runs.append(pipe.paths)
    same_metrics = all(
        strip_nondeterministic(read_metrics(runs[0].metrics / f)) == strip_nondeterministic(read_metrics(runs[1].metrics / f))
        for f in ("sft.jsonl", "rl.jsonl", "rl_constant_beta.jsonl"))
    same_rank = all((runs[0].rankings / f).read_bytes() == (runs[1].rankings / f).read_bytes()
                    for f in ("ranking.txt", "ranking_rl_constant_beta.txt"))
    a0 = load_checkpoint(runs[0].ckpt / "rl.ckpt").adapters.alpha
    a1 = load_checkpoint(runs[1].ckpt / "rl.ckpt").adapters.alpha
    report(10, same_metrics and same_rank and np.array_equal(a0, a1),
           f"metrics identical (wall-clock field excluded): {same_metrics}; rankings byte-identical: {same_rank}")


# -- 11 --------------------------------------------------------------------

def test_c11_error_modes_partition(artifact, report):
    cfg = artifact.cfg
    ck = load_checkpoint(artifact.paths.ckpt / "sft.ckpt")
    w = weights_from_arrays(ck.tensors)
    ranking = parse_ranking((artifact.paths.rankings / "ranking.txt").read_text())
    # a compressed policy so that all failure kinds get a chance to appear
    pol = policy_for_sparsity(ranking, 0.8, cfg.deploy.sink, cfg.deploy.local)
    data = gen_dataset(cfg.seed + 500, 500, cfg.tasks.eval_min_steps, cfg.tasks.eval_max_steps)
    res = evaluate(pol, data, w, ck.config, cfg.deploy.max_new)
    failures = sum(1 for r in res.rewards if r < 1.0)
    modes = res.error_modes
    classified = sum(modes.get(m.value, 0) for m in FAILURE_MODES)
    unclassified = failures - classified
    ok = res.n == 500 and unclassified == 0 and modes.get(ErrorMode.NONE.value, 0) == 500 - failures
    report(11, ok, f"{failures} failures of 500: " + ", ".join(f"{m.value} {modes.get(m.value, 0)}" for m in FAILURE_MODES)
           + f", unclassified {unclassified}")
