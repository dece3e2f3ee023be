import numpy as np
import pytest

from kvprune.harness import RunConfig, make_prompts
from kvprune.model import (
    ConfigError,
    ModelConfig,
    build_model,
    decode_step,
    greedy_decode,
    prefill,
    rope,
)
from kvprune.pruner import apply_decisions, full_decision
from kvprune.tensor import DimensionError

# greedy continuation of the first default "skewed" prompt (seed 0), frozen
SKEWED_GREEDY = [110, 140, 171, 409, 124, 50, 407, 489]


def test_same_seed_same_weights():
    a = build_model(ModelConfig(n_layers=2, seed=3))
    b = build_model(ModelConfig(n_layers=2, seed=3))
    assert np.array_equal(a.embed, b.embed)
    assert all(np.array_equal(x.wq, y.wq) and np.array_equal(x.w2, y.w2) for x, y in zip(a.layers, b.layers))
    c = build_model(ModelConfig(n_layers=2, seed=4))
    assert not np.array_equal(a.embed, c.embed)


def test_weights_are_float32_exact(small_model):
    for w in (small_model.embed, small_model.layers[0].wq, small_model.layers[1].w1):
        assert np.array_equal(w, w.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("kw", [
    {"n_q_heads": 6, "n_kv_heads": 4},
    {"max_seq": 0},
    {"head_dim": 0},
    {"head_dim": 15},
    {"rotary_dim": 40},
])
def test_bad_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_mha_and_gqa_mapping():
    mha = build_model(ModelConfig(n_layers=1, n_q_heads=4, n_kv_heads=4, head_dim=8, rotary_dim=8))
    assert mha.kv_of_q.tolist() == [0, 1, 2, 3]
    gqa = build_model(ModelConfig(n_layers=1, n_q_heads=4, n_kv_heads=2, head_dim=8, rotary_dim=8))
    assert gqa.kv_of_q.tolist() == [0, 0, 1, 1]
    cache, _ = prefill(gqa, [1, 2, 3])
    assert cache.keys[0].shape == (2, 3, 8)


def test_deterministic_logits(small_model):
    _, a = prefill(small_model, [3, 1, 4, 1, 5])
    _, b = prefill(small_model, [3, 1, 4, 1, 5])
    assert np.array_equal(a.logits, b.logits)


def test_single_token_prefill(small_model):
    cache, out = prefill(small_model, [7])
    assert all(cache.length(li) == 1 for li in range(cache.n_layers))
    assert np.all(out.last_attention_rows == 1.0)


def test_incremental_matches_batch(small_model, rng):
    toks = rng.integers(0, 64, 40)
    _, full = prefill(small_model, toks)
    cache, _ = prefill(small_model, toks[:-1])
    step = decode_step(small_model, cache, int(toks[-1]))
    np.testing.assert_allclose(step.logits, full.logits, rtol=0, atol=1e-9)


def test_prefill_rows_sum_to_one(model, rng):
    _, out = prefill(model, rng.integers(0, 512, 256), keep_rows=4)
    rows = out.last_attention_rows
    assert rows.shape == (8, 8, 4, 256)
    assert np.abs(rows.sum(axis=-1) - 1.0).max() < 1e-9


def test_errors(small_model):
    with pytest.raises(ConfigError):
        prefill(small_model, [])
    with pytest.raises(ConfigError):
        prefill(small_model, np.zeros(129, dtype=int))
    with pytest.raises(ConfigError):
        prefill(small_model, [64])
    with pytest.raises(DimensionError):
        prefill(small_model, [1, 2], keep_rows=3)
    cache, out = prefill(small_model, np.zeros(128, dtype=int))
    with pytest.raises(ConfigError):
        decode_step(small_model, cache, 0)


def test_noop_pruning_is_bit_exact(small_model, rng):
    toks = rng.integers(0, 64, 30)
    cache, out = prefill(small_model, toks)
    keep_all = [full_decision(li, h, 30) for li in range(2) for h in range(2)]
    pruned = apply_decisions(cache, keep_all)
    a = decode_step(small_model, cache.copy(), 5).logits
    b = decode_step(small_model, pruned, 5).logits
    assert np.array_equal(a, b)


def test_one_invalid_position_matches_compaction(small_model, rng):
    toks = rng.integers(0, 64, 20)
    cache, _ = prefill(small_model, toks)
    masked = cache.copy()
    compact = cache.copy()
    for li in range(2):
        masked.valid[li][:, 7] = False
        keep = np.arange(20) != 7
        compact.keys[li] = compact.keys[li][:, keep]
        compact.values[li] = compact.values[li][:, keep]
        compact.position_ids[li] = compact.position_ids[li][:, keep]
        compact.valid[li] = compact.valid[li][:, keep]
    a = decode_step(small_model, masked, 9).logits
    b = decode_step(small_model, compact, 9).logits
    assert np.abs(a - b).max() < 1e-9


def test_greedy_is_deterministic_and_frozen(model):
    cfg = RunConfig(family="skewed", n_prompts=1)
    prompt = make_prompts(cfg, model)[0]
    runs = []
    for _ in range(2):
        cache, out = prefill(model, prompt)
        toks, logits = greedy_decode(model, cache, out.logits, 8)
        runs.append(toks.tolist())
        assert logits.shape == (8, 512)
        assert cache.n_seen == 256 + 7
    assert runs[0] == runs[1] == SKEWED_GREEDY


def test_rope_preserves_relative_scores(rng):
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)
    s1 = rope(q[None], np.array([10]), 10000.0) @ rope(k[None], np.array([3]), 10000.0).T
    s2 = rope(q[None], np.array([107]), 10000.0) @ rope(k[None], np.array([100]), 10000.0).T
    assert abs(s1 - s2).max() < 1e-9


def test_partial_rope_leaves_tail_alone(rng):
    x = rng.standard_normal((3, 16))
    y = rope(x, np.array([1, 5, 9]), 10000.0, rotary_dim=8)
    assert np.array_equal(x[:, 8:], y[:, 8:])
    assert not np.allclose(x[:, :8], y[:, :8])
