"""Fixed-budget eviction baselines, applied once after prefill.

All selectors return a sorted int64 array of retained positions and break
score ties toward the lower position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kvprune.model import ConfigError
from kvprune.pruner import PruneDecision, full_decision, halt_index, reduce_attention


@dataclass(frozen=True)
class BudgetSpec:
    mode: str = "fraction"  # "fraction" | "count"
    value: float = 0.5

    def __post_init__(self):
        if self.mode not in ("fraction", "count"):
            raise ConfigError(f"budget mode must be 'fraction' or 'count', got {self.mode!r}")
        if self.mode == "fraction" and not 0.0 < self.value <= 1.0:
            raise ConfigError(f"fractional budget must lie in (0, 1], got {self.value}")
        if self.mode == "count" and self.value < 1:
            raise ConfigError(f"count budget must be >= 1, got {self.value}")

    def resolve(self, n: int) -> int:
        if self.mode == "count":
            c = int(self.value)
        else:
            # guard against 0.9 * 10 landing a hair above 9
            c = math.ceil(self.value * n - 1e-9)
        return min(max(c, 1), n)


def _as_budget(budget) -> BudgetSpec:
    if isinstance(budget, BudgetSpec):
        return budget
    return BudgetSpec("fraction", float(budget))


def _top(scores: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    if count <= 0 or candidates.size == 0:
        return np.zeros(0, dtype=np.int64)
    # stable sort on -score keeps the lower index first among ties
    idx = np.argsort(-scores[candidates], kind="stable")[:count]
    return candidates[idx]


def streaming_llm(n: int, budget, sink: int = 4) -> np.ndarray:
    """Attention sinks plus the most recent positions.

    At least one recent slot is kept, so with very small budgets the sink
    count shrinks to ``count - 1``.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    c = _as_budget(budget).resolve(n)
    s = min(sink, n, c - 1)
    recent = np.arange(n - (c - s), n)
    return np.unique(np.concatenate([np.arange(s), recent])).astype(np.int64)


def column_scores(attn) -> np.ndarray:
    """Accumulated attention per key, averaged over the rows that can see it."""
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 1:
        return a
    sums = a.sum(axis=0)
    n_rows, n = a.shape
    # rows are the last n_rows queries of a causal prompt
    first_query = n - n_rows
    seen_by = n_rows - np.maximum(np.arange(n) - first_query, 0)
    return sums / seen_by


def h2o_like(attn, budget, recent: int | None = None) -> np.ndarray:
    """Heavy hitters by accumulated attention plus a recent window.

    ``attn`` is the prompt's attention matrix (rows = queries) or a 1-D
    vector of precomputed per-key scores. ``recent`` defaults to half the
    budget (at least one).
    """
    scores = column_scores(attn)
    n = scores.shape[0]
    c = _as_budget(budget).resolve(n)
    r = max(1, c // 2) if recent is None else max(1, min(recent, c))
    recent_idx = np.arange(n - r, n)
    heavy = _top(scores, np.arange(n - r), c - r)
    return np.sort(np.concatenate([heavy, recent_idx])).astype(np.int64)


def _max_pool1d(x: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    padded = np.pad(x, pad, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    return windows.max(axis=-1)


def snapkv_like(window_rows, budget, window: int = 32, pool: int = 7) -> np.ndarray:
    """Observation-window selection.

    Prefix positions are scored by the mean attention they receive from the
    last ``window`` queries, max-pooled over ``pool`` neighbours; the top
    scorers are kept alongside the window itself. Prompts no longer than the
    window are kept whole.
    """
    rows = np.asarray(window_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None]
    n = rows.shape[1]
    if n <= window:
        return np.arange(n, dtype=np.int64)
    c = _as_budget(budget).resolve(n)
    w = min(window, rows.shape[0], n)
    if c <= w:
        return np.arange(n - c, n, dtype=np.int64)
    obs = rows[-w:, : n - w].mean(axis=0)
    pooled = _max_pool1d(obs, pool)
    picked = _top(pooled, np.arange(n - w), c - w)
    return np.sort(np.concatenate([picked, np.arange(n - w, n)])).astype(np.int64)


def attention_order(row) -> np.ndarray:
    """Positions by descending score, lower position first among ties."""
    return np.argsort(-np.asarray(row, dtype=np.float64), kind="stable").astype(np.int64)


def attn_ranked_halt(row, threshold: float, layer: int = 0, head: int = 0) -> PruneDecision:
    """Norm-halting with the ranking replaced by attention score order."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim == 2:
        row = reduce_attention(row)
    order = attention_order(row)
    res = halt_index(row, order, threshold)
    return PruneDecision(
        layer=layer,
        head=head,
        i_prune=res.i_prune,
        retained=np.sort(order[: res.i_prune]),
        n=row.shape[0],
        norm_full=res.norm_full,
        norm_at_halt=0.0 if res.degenerate else res.norm_full * (1.0 - res.loss_curve[res.i_prune - 1]),
        degenerate=res.degenerate,
    )


def fixed_decisions(kind: str, kv_rows, budget, frozen_layers=(), sink: int = 4,
                    window: int = 32, threshold: float = 0.01,
                    k_rows: int = 1) -> list[PruneDecision]:
    """Model-wide decisions for a baseline; ``kv_rows`` is (n_layers, n_kv_heads, k, n).

    ``frozen_layers`` keeps those layers whole, which gives the frozen-layer
    StreamingLLM variant when ``kind == 'slm'``.
    """
    kv_rows = np.asarray(kv_rows)
    n_layers, n_heads, _, n = kv_rows.shape
    out = []
    for li in range(n_layers):
        for h in range(n_heads):
            if li in frozen_layers:
                out.append(full_decision(li, h, n))
                continue
            rows = kv_rows[li, h]
            if kind == "attn-rank":
                d = attn_ranked_halt(rows[-k_rows:], threshold, li, h)
                out.append(d)
                continue
            if kind == "slm":
                kept = streaming_llm(n, budget, sink)
            elif kind == "h2o":
                kept = h2o_like(rows, budget)
            elif kind == "snapkv":
                kept = snapkv_like(rows, budget, window)
            else:
                raise ConfigError(f"unknown baseline {kind!r}")
            out.append(
                PruneDecision(layer=li, head=h, i_prune=len(kept), retained=kept, n=n,
                              norm_full=0.0, norm_at_halt=0.0)
            )
    return out
