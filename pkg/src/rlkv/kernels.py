"""Hot inner loops, in a numba version and an equivalent numpy version.

The public names at the bottom dispatch on :data:`rlkv._jit.USE_NUMBA`;
both implementations stay importable (``*_numpy`` / ``*_numba``) so tests
and the benchmark can compare them directly.

Cache layout used by :func:`cache_attend` (one transformer layer):

* ``K``, ``V``: (n_kv, cap, head_dim) float32, the first ``count[j]`` slots of
  row ``j`` are live, sorted by absolute position.
* ``pos``: (n_kv, cap) int64 absolute positions of the live slots.
* ``acc``: (n_kv, cap) float64 accumulated attention (score-evict heads).
* per-head policy arrays ``kind``, ``sink``, ``local``, ``window`` (int64),
  ``budget`` (float64) and ``alpha`` (float32).
"""

from __future__ import annotations

import math

import numpy as np

from . import _jit
from ._jit import njit

FULL = 0
STREAMING = 1
SCORE_EVICT = 2
MIXED = 3

# float slack when turning budget_fraction * n into a token count
CEIL_EPS = 1e-9


def score_capacity(budget: float, n_tokens: int, window: int) -> int:
    return int(math.ceil(budget * n_tokens - CEIL_EPS)) + window


# ---------------------------------------------------------------------------
# numpy reference path

def _drop_slot(K, V, pos, acc, count, j, s):
    n = count[j]
    K[j, s:n - 1] = K[j, s + 1:n]
    V[j, s:n - 1] = V[j, s + 1:n]
    pos[j, s:n - 1] = pos[j, s + 1:n]
    acc[j, s:n - 1] = acc[j, s + 1:n]
    count[j] = n - 1


def cache_attend_numpy(q, k, v, t, K, V, pos, acc, count, kind, sink, local, window,
                       budget, alpha, out, probs):
    """Insert position ``t`` into every head's cache and attend.

    Writes per-query-head outputs into ``out`` (n_q, head_dim) and attention
    weights over cache slots into ``probs`` (n_q, cap), then applies the
    head's eviction rule.
    """
    n_kv = K.shape[0]
    group = q.shape[0] // n_kv
    scale = np.float32(1.0 / math.sqrt(q.shape[1]))
    probs[:] = 0.0
    for j in range(n_kv):
        n = count[j]
        K[j, n] = k[j]
        V[j, n] = v[j]
        pos[j, n] = t
        acc[j, n] = 0.0
        count[j] = n + 1
        if kind[j] == STREAMING and count[j] > sink[j] + local[j]:
            _drop_slot(K, V, pos, acc, count, j, sink[j])
        n = count[j]
        qs = q[j * group:(j + 1) * group]
        logits = (qs @ K[j, :n].T) * scale
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        if kind[j] == MIXED:
            vis = (pos[j, :n] < sink[j]) | (pos[j, :n] > t - local[j])
            ls = np.where(vis, logits, -np.inf)
            es = np.exp(ls - ls.max(axis=1, keepdims=True))
            ps = es / es.sum(axis=1, keepdims=True)
            a = alpha[j]
            out[j * group:(j + 1) * group] = a * (p @ V[j, :n]) + (1 - a) * (ps @ V[j, :n])
            p = a * p + (1 - a) * ps
        else:
            out[j * group:(j + 1) * group] = p @ V[j, :n]
        probs[j * group:(j + 1) * group, :n] = p
        if kind[j] == SCORE_EVICT:
            acc[j, :n] += p.sum(axis=0)
            cap = score_capacity(budget[j], t + 1, window[j])
            while count[j] > cap:
                m = count[j] - window[j]
                s = int(np.argmin(acc[j, :m]))
                _drop_slot(K, V, pos, acc, count, j, s)


def repeat_run_numpy(tokens, n):
    """Longest run of consecutive i with tokens[i] == tokens[i + n]."""
    tokens = np.asarray(tokens)
    if tokens.size <= n:
        return 0
    eq = tokens[:-n] == tokens[n:]
    if not eq.any():
        return 0
    # run lengths via boundaries of the boolean sequence
    padded = np.concatenate([[False], eq, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return int((edges[1::2] - edges[::2]).max())


def streaming_mask_numpy(T, sink, local):
    """(T, T) boolean, True where query i may see key j under streaming."""
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return (j <= i) & ((j < sink) | (j > i - local))


# ---------------------------------------------------------------------------
# numba path

@njit(cache=True)
def _drop_slot_nb(K, V, pos, acc, count, j, s):
    n = count[j]
    for r in range(s, n - 1):
        for d in range(K.shape[2]):
            K[j, r, d] = K[j, r + 1, d]
            V[j, r, d] = V[j, r + 1, d]
        pos[j, r] = pos[j, r + 1]
        acc[j, r] = acc[j, r + 1]
    count[j] = n - 1


@njit(cache=True)
def _softmax_rows_nb(logits, n, vis, use_vis, p):
    for r in range(logits.shape[0]):
        m = -np.inf
        for s in range(n):
            if (not use_vis) or vis[s]:
                if logits[r, s] > m:
                    m = logits[r, s]
        tot = 0.0
        for s in range(n):
            if (not use_vis) or vis[s]:
                e = math.exp(logits[r, s] - m)
                p[r, s] = e
                tot += e
            else:
                p[r, s] = 0.0
        for s in range(n):
            p[r, s] = p[r, s] / tot


@njit(cache=True)
def cache_attend_numba(q, k, v, t, K, V, pos, acc, count, kind, sink, local, window,
                       budget, alpha, out, probs):
    n_kv = K.shape[0]
    hd = q.shape[1]
    group = q.shape[0] // n_kv
    scale = 1.0 / math.sqrt(hd)
    cap_all = K.shape[1]
    logits = np.empty((group, cap_all), dtype=np.float32)
    p = np.empty((group, cap_all), dtype=np.float32)
    ps = np.empty((group, cap_all), dtype=np.float32)
    vis = np.empty(cap_all, dtype=np.bool_)
    for r in range(probs.shape[0]):
        for s in range(probs.shape[1]):
            probs[r, s] = 0.0
    for j in range(n_kv):
        n = count[j]
        for d in range(hd):
            K[j, n, d] = k[j, d]
            V[j, n, d] = v[j, d]
        pos[j, n] = t
        acc[j, n] = 0.0
        count[j] = n + 1
        if kind[j] == STREAMING and count[j] > sink[j] + local[j]:
            _drop_slot_nb(K, V, pos, acc, count, j, sink[j])
        n = count[j]
        for g in range(group):
            h = j * group + g
            for s in range(n):
                dot = np.float32(0.0)
                for d in range(hd):
                    dot += q[h, d] * K[j, s, d]
                logits[g, s] = dot * scale
        _softmax_rows_nb(logits, n, vis, False, p)
        if kind[j] == MIXED:
            for s in range(n):
                vis[s] = pos[j, s] < sink[j] or pos[j, s] > t - local[j]
            _softmax_rows_nb(logits, n, vis, True, ps)
            a = alpha[j]
            for g in range(group):
                for s in range(n):
                    p[g, s] = a * p[g, s] + (1 - a) * ps[g, s]
        for g in range(group):
            h = j * group + g
            for d in range(hd):
                tot = np.float32(0.0)
                for s in range(n):
                    tot += p[g, s] * V[j, s, d]
                out[h, d] = tot
            for s in range(n):
                probs[h, s] = p[g, s]
        if kind[j] == SCORE_EVICT:
            for s in range(n):
                col = 0.0
                for g in range(group):
                    col += p[g, s]
                acc[j, s] += col
            cap = int(math.ceil(budget[j] * (t + 1) - CEIL_EPS)) + window[j]
            while count[j] > cap:
                m = count[j] - window[j]
                best = 0
                for s in range(1, m):
                    if acc[j, s] < acc[j, best]:
                        best = s
                _drop_slot_nb(K, V, pos, acc, count, j, best)


@njit(cache=True)
def repeat_run_numba(tokens, n):
    best = 0
    run = 0
    for i in range(tokens.shape[0] - n):
        if tokens[i] == tokens[i + n]:
            run += 1
            if run > best:
                best = run
        else:
            run = 0
    return best


@njit(cache=True)
def streaming_mask_numba(T, sink, local):
    m = np.zeros((T, T), dtype=np.bool_)
    for i in range(T):
        for j in range(i + 1):
            if j < sink or j > i - local:
                m[i, j] = True
    return m


# ---------------------------------------------------------------------------
# dispatch

def cache_attend(*args):
    if _jit.USE_NUMBA:
        return cache_attend_numba(*args)
    return cache_attend_numpy(*args)


def repeat_run(tokens, n: int) -> int:
    arr = np.ascontiguousarray(tokens, dtype=np.int64)
    if _jit.USE_NUMBA:
        return int(repeat_run_numba(arr, n))
    return repeat_run_numpy(arr, n)


def streaming_mask(T: int, sink: int, local: int) -> np.ndarray:
    if _jit.USE_NUMBA:
        return streaming_mask_numba(T, sink, local)
    return streaming_mask_numpy(T, sink, local)
