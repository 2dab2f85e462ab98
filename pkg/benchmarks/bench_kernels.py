"""Compare the numba and numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeats N]

Times the kernels on their own and an end-to-end greedy decode under a mixed
streaming/full cache policy.  Prints one line per case with the speedup.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rlkv import _jit, kernels
from rlkv.decoding import generate
from rlkv.heads import random_policy
from rlkv.model import ModelConfig, init_weights
from rlkv.tasks import gen_instance


def _time(fn, repeats: int) -> float:
    fn()  # warm-up, includes jit compilation
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _attend_case(n_steps: int = 200):
    rng = np.random.default_rng(0)
    n_kv, group, hd = 4, 2, 16
    kinds = np.array([kernels.FULL, kernels.STREAMING, kernels.SCORE_EVICT, kernels.MIXED], dtype=np.int64)
    sink = np.full(n_kv, 4, dtype=np.int64)
    local = np.full(n_kv, 8, dtype=np.int64)
    window = np.full(n_kv, 4, dtype=np.int64)
    budget = np.full(n_kv, 0.5)
    alpha = np.full(n_kv, 0.5, dtype=np.float32)
    qs = rng.standard_normal((n_steps, n_kv * group, hd)).astype(np.float32)
    ks = rng.standard_normal((n_steps, n_kv, hd)).astype(np.float32)
    vs = rng.standard_normal((n_steps, n_kv, hd)).astype(np.float32)

    def run(fn):
        cap = n_steps + 1
        K = np.zeros((n_kv, cap, hd), np.float32)
        V = np.zeros_like(K)
        pos = np.zeros((n_kv, cap), np.int64)
        acc = np.zeros((n_kv, cap))
        count = np.zeros(n_kv, np.int64)
        out = np.zeros((n_kv * group, hd), np.float32)
        probs = np.zeros((n_kv * group, cap))
        for t in range(n_steps):
            fn(qs[t], ks[t], vs[t], t, K, V, pos, acc, count, kinds, sink, local, window, budget, alpha, out, probs)

    return run


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not _jit.HAVE_NUMBA:
        raise SystemExit("numba is not available; nothing to compare")

    attend = _attend_case()
    tokens = np.tile(np.arange(10, 14), 200)
    cfg = ModelConfig()
    weights = init_weights(cfg, seed=0, requires_grad=False)
    policy = random_policy(0.5, cfg.n_layers, cfg.n_kv_heads, 4, 8, seed=0)
    prompt = gen_instance(0, 6).prompt

    def decode():
        generate(prompt, weights, cfg, policy=policy, max_new=64)

    cases = [
        ("cache_attend x200", lambda: attend(kernels.cache_attend_numpy), lambda: attend(kernels.cache_attend_numba)),
        ("repeat_run n=800", lambda: kernels.repeat_run_numpy(tokens, 4), lambda: kernels.repeat_run_numba(tokens, 4)),
        ("streaming_mask T=256", lambda: kernels.streaming_mask_numpy(256, 8, 16),
         lambda: kernels.streaming_mask_numba(256, 8, 16)),
    ]
    print(f"{'case':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, f_np, f_nb in cases:
        a, b = _time(f_np, args.repeats), _time(f_nb, args.repeats)
        print(f"{name:<24}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{a / b:>9.1f}x")

    times = {}
    for flag in (False, True):
        _jit.USE_NUMBA = flag
        times[flag] = _time(decode, args.repeats)
    _jit.USE_NUMBA = True
    a, b = times[False], times[True]
    print(f"{'generate 64 tokens':<24}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
