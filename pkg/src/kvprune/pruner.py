"""Threshold-free KV pruning by position ranking and a Frobenius-norm halting rule.

Positions are ranked sinks-first then newest-to-oldest; the ranked prefix is
grown until dropping everything after it loses less than ``T`` of the reduced
attention row's norm. One halting index is chosen per (layer, kv head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from kvprune.model import BatchKvCache, ConfigError, KvCache
from kvprune.tensor import CausalMask, DimensionError


@dataclass(frozen=True)
class PrunerConfig:
    threshold: float = 0.01
    sink: int = 4
    # int >= 1: row count; float in (0, 1): fraction of the prompt length
    k_rows: int | float = 1
    frozen_layers: frozenset[int] = field(default_factory=lambda: frozenset({0, 1}))
    min_retain_floor: int | None = None
    # reduction over query heads sharing one kv head
    head_reduce: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.sink < 0:
            raise ConfigError(f"sink must be >= 0, got {self.sink}")
        if isinstance(self.k_rows, float) and not self.k_rows.is_integer():
            if not 0.0 < self.k_rows < 1.0:
                raise ConfigError(f"fractional k_rows must lie in (0, 1), got {self.k_rows}")
        elif self.k_rows < 1:
            raise ConfigError(f"k_rows must be >= 1, got {self.k_rows}")
        if self.min_retain_floor is not None and self.min_retain_floor < 1:
            raise ConfigError(f"min_retain_floor must be >= 1, got {self.min_retain_floor}")
        if self.head_reduce not in ("mean", "max"):
            raise ConfigError(f"head_reduce must be 'mean' or 'max', got {self.head_reduce!r}")
        object.__setattr__(self, "frozen_layers", frozenset(int(x) for x in self.frozen_layers))

    def resolve_k(self, n: int) -> int:
        if isinstance(self.k_rows, float) and not self.k_rows.is_integer():
            return max(1, round(self.k_rows * n))
        return int(self.k_rows)


@dataclass(frozen=True)
class PruneDecision:
    layer: int
    head: int
    i_prune: int
    retained: np.ndarray  # sorted original positions
    n: int
    norm_full: float
    norm_at_halt: float
    degenerate: bool = False

    @property
    def budget(self) -> float:
        return self.i_prune / self.n

    @property
    def retained_set(self) -> frozenset[int]:
        return frozenset(int(p) for p in self.retained)


class HaltResult(NamedTuple):
    i_prune: int
    norm_full: float
    loss_curve: np.ndarray
    degenerate: bool


def rank_positions(n: int, m: int) -> np.ndarray:
    """Sinks ``0..m-1`` first, then the remaining positions newest-first."""
    if n < 1:
        raise DimensionError(f"cannot rank {n} positions")
    if m < 0:
        raise DimensionError(f"sink count must be >= 0, got {m}")
    m = min(m, n)
    return np.concatenate([np.arange(m), np.arange(n - 1, m - 1, -1)]).astype(np.int64)


def reduce_attention(last_rows, mask: CausalMask | None = None) -> np.ndarray:
    """Collapse the last ``k`` attention rows into one score per key position.

    Each position's score is the sum of its nonzero entries divided by how many
    rows gave it a nonzero score; positions no row attends to score 0. With a
    single row this is the row itself.
    """
    rows = np.asarray(last_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None]
    if rows.ndim != 2:
        raise DimensionError(f"expected (k, n) rows, got shape {rows.shape}")
    k, n = rows.shape
    if k > n:
        raise DimensionError(f"k={k} rows exceeds n={n} positions")
    if mask is not None:
        if mask.seq_len != n:
            raise DimensionError(f"mask covers {mask.seq_len} positions, rows have {n}")
        rows = np.where(mask.allowed(k), rows, 0.0)
    if k == 1:
        return rows[0].copy()
    counts = np.count_nonzero(rows, axis=0)
    sums = rows.sum(axis=0)
    return np.divide(sums, counts, out=np.zeros(n), where=counts > 0)


def halt_index(row, order, threshold: float) -> HaltResult:
    """Smallest ranked-prefix length whose relative norm loss is below ``threshold``.

    Squares are permuted into ranked order and prefix-summed, so the norm of
    every candidate prefix comes from one cumulative sum.
    """
    row = np.asarray(row, dtype=np.float64)
    order = np.asarray(order)
    n = row.shape[0]
    if n < 1 or row.ndim != 1:
        raise DimensionError(f"expected a non-empty 1-D row, got shape {row.shape}")
    if order.shape != (n,):
        raise DimensionError(f"order has shape {order.shape}, row has {n} entries")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    cums = np.cumsum((row * row)[order])
    norm_full = math.sqrt(cums[-1])
    if norm_full == 0.0:
        return HaltResult(n, 0.0, np.zeros(n), True)
    loss = 1.0 - np.sqrt(cums) / norm_full
    hits = np.flatnonzero(loss[:-1] < threshold)
    i_prune = int(hits[0]) + 1 if hits.size else n
    return HaltResult(i_prune, norm_full, loss, False)


def kv_head_rows(rows, n_kv_heads: int, how: str = "mean") -> np.ndarray:
    """Reduce per-query-head attention rows to per-kv-head rows (float32).

    ``rows`` has shape (..., n_q_heads, k, n). The float32 result is what the
    pruner consumes and what attention traces store, so both paths see
    identical bits.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n_q = rows.shape[-3]
    if n_q % n_kv_heads:
        raise DimensionError(f"{n_q} query heads do not split into {n_kv_heads} kv heads")
    g = n_q // n_kv_heads
    grouped = rows.reshape(rows.shape[:-3] + (n_kv_heads, g) + rows.shape[-2:])
    red = grouped.mean(axis=-3) if how == "mean" else grouped.max(axis=-3)
    return red.astype(np.float32)


def full_decision(layer: int, head: int, n: int, norm_full: float = 0.0) -> PruneDecision:
    return PruneDecision(
        layer=layer,
        head=head,
        i_prune=n,
        retained=np.arange(n, dtype=np.int64),
        n=n,
        norm_full=norm_full,
        norm_at_halt=norm_full,
    )


def decide_row(row, layer: int, head: int, config: PrunerConfig, order=None) -> PruneDecision:
    """Halting decision for one reduced attention row."""
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[0]
    if order is None:
        order = rank_positions(n, config.sink)
    res = halt_index(row, order, config.threshold)
    i_prune = res.i_prune
    if config.min_retain_floor is not None:
        i_prune = max(i_prune, min(config.min_retain_floor, n))
    kept = np.sort(np.asarray(order[:i_prune], dtype=np.int64))
    norm_at_halt = res.norm_full * (1.0 - res.loss_curve[i_prune - 1]) if not res.degenerate else 0.0
    return PruneDecision(
        layer=layer,
        head=head,
        i_prune=i_prune,
        retained=kept,
        n=n,
        norm_full=res.norm_full,
        norm_at_halt=norm_at_halt,
        degenerate=res.degenerate,
    )


def prune_layer(attn, layer: int, config: PrunerConfig) -> list[PruneDecision]:
    """Decisions for every kv head of one layer.

    ``attn`` holds float32 kv-head rows of shape (n_kv_heads, k, n), as
    produced by :func:`kv_head_rows`.
    """
    attn = np.asarray(attn)
    if attn.ndim != 3:
        raise DimensionError(f"expected (n_kv_heads, k, n) rows, got shape {attn.shape}")
    n_heads, k_avail, n = attn.shape
    if layer in config.frozen_layers:
        return [full_decision(layer, h, n) for h in range(n_heads)]
    k = config.resolve_k(n)
    if k > k_avail:
        raise DimensionError(f"k={k} rows requested but only {k_avail} available")
    out = []
    for h in range(n_heads):
        row = reduce_attention(attn[h, k_avail - k :, :])
        out.append(decide_row(row, layer, h, config))
    return out


def prune_model(kv_rows, config: PrunerConfig) -> list[PruneDecision]:
    """Decisions for all layers; ``kv_rows`` is (n_layers, n_kv_heads, k, n)."""
    out = []
    for li in range(kv_rows.shape[0]):
        out.extend(prune_layer(kv_rows[li], li, config))
    return out


def mean_budget(decisions) -> float:
    return float(np.mean([d.budget for d in decisions]))


def layer_budgets(decisions, n_layers: int) -> list[float]:
    per = [[] for _ in range(n_layers)]
    for d in decisions:
        per[d.layer].append(d.budget)
    return [float(np.mean(b)) if b else float("nan") for b in per]


def _decision_grid(cache, decisions) -> dict:
    grid = {}
    for d in decisions:
        grid[(d.layer, d.head)] = d
    expected = {(li, h) for li in range(len(cache.keys)) for h in range(cache.keys[li].shape[0])}
    if set(grid) != expected:
        missing = sorted(expected - set(grid))[:4]
        extra = sorted(set(grid) - expected)[:4]
        raise DimensionError(f"decisions do not cover the cache: missing {missing}, extra {extra}")
    return grid


def apply_decisions(cache: KvCache, decisions, compact: bool = True) -> KvCache:
    """Return a new cache where only each head's retained positions stay valid.

    With ``compact`` the surviving entries are physically gathered; heads of a
    layer are padded to that layer's longest retained set and pad slots are
    invalid. Without it only the validity mask changes.
    """
    grid = _decision_grid(cache, decisions)
    out = cache.copy()
    for li in range(cache.n_layers):
        h, length = cache.valid[li].shape
        keep = np.zeros((h, length), dtype=bool)
        for hi in range(h):
            d = grid[(li, hi)]
            pos = cache.position_ids[li][hi]
            hit = np.isin(pos, d.retained) & cache.valid[li][hi]
            if hit.sum() != len(d.retained):
                raise DimensionError(
                    f"layer {li} head {hi}: {len(d.retained)} retained positions, "
                    f"{int(hit.sum())} found among valid cache entries"
                )
            keep[hi] = hit
        if not compact:
            out.valid[li] = keep
            continue
        width = int(keep.sum(axis=1).max())
        k = np.zeros((h, width, cache.keys[li].shape[2]), dtype=cache.keys[li].dtype)
        v = np.zeros_like(k)
        pos = np.full((h, width), -1, dtype=np.int64)
        valid = np.zeros((h, width), dtype=bool)
        for hi in range(h):
            idx = np.flatnonzero(keep[hi])
            r = idx.size
            k[hi, :r] = cache.keys[li][hi, idx]
            v[hi, :r] = cache.values[li][hi, idx]
            pos[hi, :r] = cache.position_ids[li][hi, idx]
            valid[hi, :r] = True
        out.keys[li], out.values[li], out.position_ids[li], out.valid[li] = k, v, pos, valid
    return out


@dataclass
class BatchPruneResult:
    cache: BatchKvCache
    decisions: list[list[PruneDecision]]  # per sample


def pad_batch(caches: list[KvCache]) -> BatchKvCache:
    """Stack caches into one padded batch; pad slots are invalid."""
    if not caches:
        raise DimensionError("empty batch")
    n_layers = caches[0].n_layers
    keys, values, pos, valid = [], [], [], []
    for li in range(n_layers):
        width = max(c.length(li) for c in caches)
        h, _, hd = caches[0].keys[li].shape
        bk = np.zeros((len(caches), h, width, hd), dtype=caches[0].keys[li].dtype)
        bv = np.zeros_like(bk)
        bp = np.full((len(caches), h, width), -1, dtype=np.int64)
        bm = np.zeros((len(caches), h, width), dtype=bool)
        for b, c in enumerate(caches):
            length = c.length(li)
            bk[b, :, :length] = c.keys[li]
            bv[b, :, :length] = c.values[li]
            bp[b, :, :length] = c.position_ids[li]
            bm[b, :, :length] = c.valid[li]
        keys.append(bk)
        values.append(bv)
        pos.append(bp)
        valid.append(bm)
    return BatchKvCache(
        keys=keys,
        values=values,
        position_ids=pos,
        valid=valid,
        n_seen=np.array([c.n_seen for c in caches], dtype=np.int64),
    )


def prune_batch(caches: list[KvCache], attn: list, config: PrunerConfig) -> BatchPruneResult:
    """Prune each sample independently, then pad into one batch cache.

    ``attn[b]`` holds sample ``b``'s kv-head rows, shape (n_layers, n_kv_heads, k, n_b).
    """
    if not caches:
        raise DimensionError("empty batch")
    if len(attn) != len(caches):
        raise DimensionError(f"{len(caches)} caches but {len(attn)} attention sets")
    decisions = [prune_model(np.asarray(a), config) for a in attn]
    pruned = [apply_decisions(c, d) for c, d in zip(caches, decisions)]
    return BatchPruneResult(cache=pad_batch(pruned), decisions=decisions)
