import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvprune.tensor import CausalMask, DimensionError, attention, masked_softmax


def naive_softmax(scores, allowed):
    out = np.zeros_like(scores)
    for i in range(scores.shape[0]):
        idx = [j for j in range(scores.shape[1]) if allowed[i, j]]
        if not idx:
            continue
        top = max(scores[i, j] for j in idx)
        tot = sum(math.exp(scores[i, j] - top) for j in idx)
        for j in idx:
            out[i, j] = math.exp(scores[i, j] - top) / tot
    return out


def test_single_entry():
    assert masked_softmax(np.array([[7.0]]), CausalMask(1)).tolist() == [[1.0]]


def test_uniform_causal():
    p = masked_softmax(np.zeros((2, 2)), CausalMask(2))
    assert p.tolist() == [[1.0, 0.0], [0.5, 0.5]]


def test_random_against_scalar_loop(rng):
    s = rng.standard_normal((3, 3)) * 3
    mask = CausalMask(3)
    np.testing.assert_allclose(masked_softmax(s, mask), naive_softmax(s, mask.allowed()), rtol=1e-12, atol=0)


def test_masked_entries_are_exact_zeros(rng):
    s = rng.standard_normal((5, 5))
    p = masked_softmax(s, CausalMask(5, extra_invalid=np.arange(5) == 1))
    assert np.all(p[np.triu_indices(5, 1)] == 0.0)
    assert np.all(p[1:, 1] == 0.0)


def test_nothing_attendable_gives_zero_row():
    p = masked_softmax(np.ones((1, 3)), np.zeros((1, 3), dtype=bool))
    assert p.tolist() == [[0.0, 0.0, 0.0]]


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        masked_softmax(np.zeros((3, 3)), CausalMask(4))


def test_attention_mean_of_two_values():
    v = np.eye(2)
    q = np.zeros((1, 2))
    k = np.ones((2, 2))
    out, probs = attention(q, k, v, np.ones((1, 2), dtype=bool))
    np.testing.assert_allclose(out, [[0.5, 0.5]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_against_triple_loop(rng):
    n, d = 4, 3
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    out, probs = attention(q, k, v, CausalMask(n))
    ref = np.zeros((n, d))
    for i in range(n):
        s = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(i + 1)]
        e = [math.exp(x - max(s)) for x in s]
        for j in range(i + 1):
            for c in range(d):
                ref[i, c] += e[j] / sum(e) * v[j, c]
    assert np.abs(out - ref).max() < 1e-12
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_dimension_errors():
    with pytest.raises(DimensionError):
        attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), CausalMask(2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.just(8)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_rows_sum_to_one_or_zero(scores):
    allowed = np.tril(np.ones((8, 8), dtype=bool))[-scores.shape[0]:]
    p = masked_softmax(scores, allowed)
    sums = p.sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) < 1e-12)
    assert np.all(p[~allowed] == 0.0)
