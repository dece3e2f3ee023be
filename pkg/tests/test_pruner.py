import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvprune.model import ConfigError, prefill
from kvprune.oracle import naive_halt, random_softmax_row
from kvprune.pruner import (
    PruneDecision,
    PrunerConfig,
    apply_decisions,
    decide_row,
    halt_index,
    kv_head_rows,
    pad_batch,
    prune_batch,
    prune_layer,
    rank_positions,
    reduce_attention,
)
from kvprune.tensor import CausalMask, DimensionError


# --- ranking ---------------------------------------------------------------

@pytest.mark.parametrize("n,m,expected", [
    (7, 4, [0, 1, 2, 3, 6, 5, 4]),
    (3, 4, [0, 1, 2]),
    (6, 0, [5, 4, 3, 2, 1, 0]),
    (1, 4, [0]),
])
def test_rank_examples(n, m, expected):
    assert rank_positions(n, m).tolist() == expected


def test_rank_rejects_empty():
    with pytest.raises(DimensionError):
        rank_positions(0, 4)


@given(st.integers(1, 300), st.integers(0, 40))
def test_rank_is_permutation_with_sinks_first(n, m):
    r = rank_positions(n, m)
    assert sorted(r.tolist()) == list(range(n))
    s = min(m, n)
    assert r[:s].tolist() == list(range(s))
    assert np.all(np.diff(r[s:]) == -1)


# --- reduced attention -----------------------------------------------------

def scalar_reduce(rows):
    k, n = len(rows), len(rows[0])
    out = []
    for i in range(n):
        vals = [rows[r][i] for r in range(k) if rows[r][i] != 0.0]
        out.append(sum(vals) / len(vals) if vals else 0.0)
    return out


def test_reduce_single_row_identity():
    assert reduce_attention(np.array([[0.2, 0.3, 0.5]])).tolist() == [0.2, 0.3, 0.5]


def test_reduce_two_rows_hand_example():
    rows = np.array([[0.4, 0.6, 0.0], [0.2, 0.3, 0.5]])
    s = reduce_attention(rows)
    np.testing.assert_allclose(s, [0.3, 0.45, 0.5], rtol=0, atol=1e-12)
    assert s.tolist() == scalar_reduce(rows.tolist())


def test_reduce_with_mask_zeroes_future():
    rows = np.array([[0.4, 0.6, 0.7], [0.2, 0.3, 0.5]])
    s = reduce_attention(rows, CausalMask(3))
    np.testing.assert_allclose(s, [0.3, 0.45, 0.5], rtol=0, atol=1e-12)


def test_reduce_uniform_full():
    n = 9
    s = reduce_attention(np.full((n, n), 1.0 / n))
    np.testing.assert_allclose(s, 1.0 / n, rtol=1e-15)


def test_reduce_matches_scalar_loop(rng):
    rows = rng.random((5, 12))
    rows[rng.random((5, 12)) < 0.3] = 0.0
    np.testing.assert_allclose(reduce_attention(rows), scalar_reduce(rows.tolist()), rtol=1e-15)


def test_reduce_rejects_k_above_n():
    with pytest.raises(DimensionError):
        reduce_attention(np.ones((4, 3)))


# --- halting ---------------------------------------------------------------

def test_halt_skewed_row():
    row = np.array([0.9, 0.09, 0.005, 0.005])
    res = halt_index(row, np.arange(4), 0.01)
    assert res.i_prune == 1
    assert abs(res.loss_curve[0] - 0.0049932) < 1e-6


@given(st.integers(1, 128), st.integers(0, 2**32 - 1))
@settings(max_examples=80)
def test_threshold_zero_keeps_everything(n, seed):
    row = random_softmax_row(np.random.default_rng(seed), n)
    assert halt_index(row, rank_positions(n, 4), 0.0).i_prune == n


@pytest.mark.parametrize("n", list(range(1, 129)))
def test_uniform_closed_form(n):
    row = np.full(n, 1.0 / n)
    expected = min(n, math.floor(0.9801 * n) + 1)
    assert halt_index(row, rank_positions(n, 4), 0.01).i_prune == expected
    assert naive_halt(row, rank_positions(n, 4), 0.01) == expected


def test_all_zero_row_is_degenerate():
    res = halt_index(np.zeros(5), np.arange(5), 0.5)
    assert res.i_prune == 5 and res.degenerate and res.norm_full == 0.0


def test_halt_argument_errors():
    with pytest.raises(DimensionError):
        halt_index(np.ones(3), np.arange(4), 0.1)
    with pytest.raises(ConfigError):
        halt_index(np.ones(3), np.arange(3), 1.5)


# frozen: seeded row (random_softmax_row, seed 20, n=24, sink 4)
FROZEN_HALTS = {0.0: 24, 1e-3: 20, 1e-2: 8, 1e-1: 5, 1.0: 1}


@pytest.mark.parametrize("t", sorted(FROZEN_HALTS))
def test_frozen_halts(t):
    row = random_softmax_row(np.random.default_rng(20), 24)
    assert halt_index(row, rank_positions(24, 4), t).i_prune == FROZEN_HALTS[t]


@given(st.integers(1, 96), st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.integers(0, 8))
@settings(max_examples=150)
def test_decision_invariants(n, seed, t, m):
    row = random_softmax_row(np.random.default_rng(seed), n)
    cfg = PrunerConfig(threshold=t, sink=m, frozen_layers=())
    d = decide_row(row, 3, 0, cfg)
    order = rank_positions(n, m)
    assert 1 <= d.i_prune <= n
    assert len(d.retained) == d.i_prune
    assert d.retained_set == set(order[:d.i_prune].tolist())
    assert 0.0 < d.budget <= 1.0
    if d.i_prune < n:
        assert 1.0 - d.norm_at_halt / d.norm_full < t


def test_min_retain_floor():
    row = np.array([0.97, 0.01, 0.01, 0.01])
    d = decide_row(row, 2, 0, PrunerConfig(threshold=0.5, sink=1, min_retain_floor=3))
    assert d.i_prune == 3 and d.retained.tolist() == [0, 2, 3]


def test_k_fraction_resolution():
    assert PrunerConfig(k_rows=0.01).resolve_k(256) == 3
    assert PrunerConfig(k_rows=0.01).resolve_k(20) == 1
    assert PrunerConfig(k_rows=4).resolve_k(256) == 4
    with pytest.raises(ConfigError):
        PrunerConfig(k_rows=0)
    with pytest.raises(ConfigError):
        PrunerConfig(threshold=-0.1)


# --- layer / model ---------------------------------------------------------

def test_frozen_layer_keeps_everything(rng):
    attn = rng.random((4, 1, 32)).astype(np.float32)
    for d in prune_layer(attn, 0, PrunerConfig()):
        assert d.i_prune == 32 and d.budget == 1.0


def test_threshold_one_keeps_single_position(rng):
    attn = rng.random((4, 1, 32)).astype(np.float32)
    assert [d.i_prune for d in prune_layer(attn, 5, PrunerConfig(threshold=1.0))] == [1] * 4


def test_layer_against_sequential_oracle(rng):
    rows = np.stack([random_softmax_row(rng, 64) for _ in range(4)])[:, None, :].astype(np.float32)
    cfg = PrunerConfig(frozen_layers=())
    for h, d in enumerate(prune_layer(rows, 2, cfg)):
        assert d.i_prune == naive_halt(rows[h, 0].astype(np.float64), rank_positions(64, 4), 0.01)


def test_layer_shape_errors(rng):
    with pytest.raises(DimensionError):
        prune_layer(rng.random((4, 32)), 2, PrunerConfig())
    with pytest.raises(DimensionError):
        prune_layer(rng.random((4, 1, 32)), 2, PrunerConfig(k_rows=2))


def test_kv_head_rows_mean_and_dtype(rng):
    rows = rng.random((3, 8, 2, 10))
    out = kv_head_rows(rows, 4)
    assert out.dtype == np.float32 and out.shape == (3, 4, 2, 10)
    np.testing.assert_allclose(out[1, 2], rows[1, 4:6].mean(axis=0), rtol=1e-6)
    with pytest.raises(DimensionError):
        kv_head_rows(rows, 3)


# --- applying decisions ----------------------------------------------------

def _decisions(cache, keep):
    out = []
    n = cache.n_seen
    for li in range(cache.n_layers):
        for h in range(cache.n_kv_heads):
            kept = np.array(sorted(keep(li, h)), dtype=np.int64)
            out.append(PruneDecision(li, h, len(kept), kept, n, 1.0, 1.0))
    return out


def test_full_retention_leaves_cache_unchanged(small_model, rng):
    cache, _ = prefill(small_model, rng.integers(0, 64, 16))
    out = apply_decisions(cache, _decisions(cache, lambda li, h: range(16)))
    for li in range(2):
        assert np.array_equal(out.keys[li], cache.keys[li])
        assert np.array_equal(out.values[li], cache.values[li])
        assert np.array_equal(out.position_ids[li], cache.position_ids[li])


def test_structural_retention(small_model, rng):
    cache, _ = prefill(small_model, rng.integers(0, 64, 64))
    out = apply_decisions(cache, _decisions(cache, lambda li, h: [0, 1, 2, 3, 63]))
    for li in range(2):
        for h in range(2):
            assert out.n_valid(li, h) == 5
            assert out.retained_positions(li, h).tolist() == [0, 1, 2, 3, 63]
            np.testing.assert_array_equal(out.keys[li][h, 4], cache.keys[li][h, 63])


def test_masked_vs_compacted_decode(small_model, rng):
    from kvprune.model import decode_step
    cache, _ = prefill(small_model, rng.integers(0, 64, 40))
    picks = {(li, h): rng.choice(40, rng.integers(1, 40), replace=False) for li in range(2) for h in range(2)}
    dec = _decisions(cache, lambda li, h: picks[(li, h)])
    a = decode_step(small_model, apply_decisions(cache, dec, compact=True), 3).logits
    b = decode_step(small_model, apply_decisions(cache, dec, compact=False), 3).logits
    assert np.abs(a - b).max() < 1e-9


def test_decision_cache_mismatch(small_model, rng):
    cache, _ = prefill(small_model, rng.integers(0, 64, 8))
    dec = _decisions(cache, lambda li, h: range(8))
    with pytest.raises(DimensionError):
        apply_decisions(cache, dec[:-1])
    bad = _decisions(cache, lambda li, h: [0, 9])
    with pytest.raises(DimensionError):
        apply_decisions(cache, bad)


# --- batching --------------------------------------------------------------

def test_batch_padding_structure(small_model, rng):
    c1, _ = prefill(small_model, rng.integers(0, 64, 10))
    c2, _ = prefill(small_model, rng.integers(0, 64, 7))
    b = pad_batch([c1, c2])
    assert b.length(0) == 10
    assert b.valid[0][1, 0].tolist() == [True] * 7 + [False] * 3
    assert b.position_ids[0][1, 0, 7:].tolist() == [-1, -1, -1]


def test_batch_of_one_matches_single(small_model, rng):
    cache, out = prefill(small_model, rng.integers(0, 64, 30))
    rows = kv_head_rows(out.last_attention_rows, 2)
    cfg = PrunerConfig(threshold=0.05, frozen_layers=())
    res = prune_batch([cache], [rows], cfg)
    single = apply_decisions(cache, [d for li in range(2) for d in prune_layer(rows[li], li, cfg)])
    s = res.cache.sample(0)
    for li in range(2):
        assert np.array_equal(s.keys[li], single.keys[li])
        assert np.array_equal(s.valid[li], single.valid[li])


def test_empty_batch():
    with pytest.raises(DimensionError):
        prune_batch([], [], PrunerConfig())
