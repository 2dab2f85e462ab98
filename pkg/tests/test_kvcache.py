import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlkv.kvcache import (CachePolicy, Full, HeadCacheState, ScoreEvict, Streaming, kv_memory_bytes,
                          score_evict_update, streaming_visible_set)
from rlkv.model import ModelConfig


def test_visible_set_examples():
    assert streaming_visible_set(3, 4, 8) == [0, 1, 2, 3]
    assert streaming_visible_set(20, 2, 3) == [0, 1, 18, 19, 20]


@given(st.integers(0, 300), st.integers(1, 20), st.integers(1, 40))
@settings(max_examples=200, deadline=None)
def test_visible_set_size(t, sink, local):
    vis = streaming_visible_set(t, sink, local)
    assert len(vis) == min(t + 1, sink + local)
    assert vis[-1] == t and vis == sorted(set(vis))


def test_streaming_bytes_per_head():
    cfg = ModelConfig(n_layers=1, n_query_heads=2, n_kv_heads=2, head_dim=8, max_seq_len=2048,
                      sink_train=16, local_train=64)
    pol = CachePolicy.uniform(1, 2, Streaming(16, 64))
    total, per_head = kv_memory_bytes(pol, 1000, cfg)
    assert per_head.tolist() == [[5120, 5120]]
    assert total == 10240


def test_streaming_total_flat_after_window():
    cfg = ModelConfig()
    pol = CachePolicy.uniform(cfg.n_layers, cfg.n_kv_heads, Streaming(4, 8))
    totals = {kv_memory_bytes(pol, n, cfg)[0] for n in range(12, 500)}
    assert len(totals) == 1
    assert kv_memory_bytes(pol, 5, cfg)[0] < totals.pop()


def test_full_bytes_grow_linearly():
    cfg = ModelConfig()
    pol = CachePolicy.all_full(cfg.n_layers, cfg.n_kv_heads)
    b1, b2 = kv_memory_bytes(pol, 10, cfg)[0], kv_memory_bytes(pol, 20, cfg)[0]
    assert b2 == 2 * b1 == 2 * 10 * 2 * cfg.head_dim * 4 * cfg.n_layers * cfg.n_kv_heads


def test_policy_validation():
    with pytest.raises(ValueError):
        Streaming(0, 4)
    with pytest.raises(ValueError):
        ScoreEvict(0.0, 2)
    with pytest.raises(ValueError):
        CachePolicy(((Full(),), (Full(), Full())))
    pol = CachePolicy(((Full(), Streaming(2, 2)),))
    assert pol.full_heads() == {(0, 0)}
    assert not pol.is_all_full()
    assert pol.describe() == "F S2+2"


def test_score_evict_counterexample():
    # 50% budget, window 1; scores after 4 tokens: position 1 is the lightest
    pol = ScoreEvict(0.5, 1)
    st_ = HeadCacheState()
    rows = [[1.0], [0.6, 0.4], [0.5, 0.1, 0.4], [0.4, 0.05, 0.3, 0.25]]
    for t, row in enumerate(rows):
        # row covers the kept entries plus t itself
        st_ = score_evict_update(st_, row[:len(st_.kept)] + [row[-1]], t, pol)
    # accumulated: [2.5, 0.55, 0.7, 0.25]; capacity 3, position 3 is in the window
    assert st_.kept == [0, 2, 3]
    np.testing.assert_allclose(st_.scores, [2.5, 0.7, 0.25])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.1, 1.0), st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_score_evict_respects_capacity(weights, frac, window):
    pol = ScoreEvict(frac, window)
    st_ = HeadCacheState()
    for t, w in enumerate(weights):
        row = [w] * len(st_.kept)
        st_ = score_evict_update(st_, row, t, pol)
        assert len(st_.kept) <= pol.capacity(t + 1)
        # the newest window positions always survive
        recent = list(range(max(0, t - window + 1), t + 1))
        assert st_.kept[-len(recent):] == recent


def test_score_evict_rejects_bad_rows():
    st_ = HeadCacheState([0, 1], [0.2, 0.3])
    with pytest.raises(ValueError):
        score_evict_update(st_, [0.1], 2, ScoreEvict(0.5, 1))
    with pytest.raises(ValueError):
        score_evict_update(st_, [0.1, -0.1], 2, ScoreEvict(0.5, 1))
    with pytest.raises(ValueError):
        score_evict_update(st_, [0.1, 0.1], 1, ScoreEvict(0.5, 1))
