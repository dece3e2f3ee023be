"""Brute-force references for the fast paths.

Nothing here calls into the pruner's arithmetic: norms are recomputed from
scratch for every candidate prefix, subsets are enumerated exhaustively, and
generation over pruned caches runs on physically copied entries with its own
forward pass and no masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

# only used to produce the fast-path results under test
from kvprune.pruner import halt_index, rank_positions


class OracleError(ValueError):
    pass


@dataclass
class OracleReport:
    case: dict
    fast: Any
    oracle: Any
    agree: bool
    discrepancy: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def prefix_losses(row, order) -> np.ndarray:
    """Relative norm loss of every ranked prefix, each norm computed from scratch."""
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[0]
    rank_of = np.empty(n, dtype=np.int64)
    rank_of[np.asarray(order)] = np.arange(n)
    # masked[j - 1] keeps exactly the first j ranked positions, in original order
    masked = np.where(rank_of[None, :] < np.arange(1, n + 1)[:, None], row[None, :], 0.0)
    norms = np.sqrt(np.sum(masked * masked, axis=1))
    full = np.sqrt(np.sum(row * row))
    if full == 0.0:
        return np.zeros(n)
    return 1.0 - norms / full


def first_below(losses, threshold: float) -> int:
    n = len(losses)
    for j in range(1, n):
        if losses[j - 1] < threshold:
            return j
    return n


def naive_halt(row, order, threshold: float) -> int:
    """First prefix length j with loss < threshold, scanning j = 1..n; n if none."""
    row = np.asarray(row, dtype=np.float64)
    if not np.any(row):
        return row.shape[0]
    return first_below(prefix_losses(row, order), threshold)


def exhaustive_min_subset(row, threshold: float, require_last: bool = True) -> int:
    """Smallest subset (over all 2^n) whose norm loss is below ``threshold``.

    With ``require_last`` only subsets containing the final position count.
    Returns n when no proper subset qualifies.
    """
    sq = np.asarray(row, dtype=np.float64) ** 2
    n = sq.shape[0]
    if n > 16:
        raise OracleError(f"enumeration limited to n <= 16, got {n}")
    full = math.sqrt(math.fsum(sq))
    if full == 0.0:
        return n
    masks = np.arange(1 << n, dtype=np.int64)
    if require_last:
        masks = masks[(masks >> (n - 1)) & 1 == 1]
    bits = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)
    loss = 1.0 - np.sqrt(bits @ sq) / full
    sizes = bits.sum(axis=1).astype(np.int64)
    ok = (loss < threshold) & (sizes < n)
    return int(sizes[ok].min()) if ok.any() else n


# ---------------------------------------------------------------------------
# reference generation over physically compacted caches


def _rms(x):
    return x / np.sqrt(np.mean(x * x) + 1e-6)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def _rotate(vec, pos, base, rotary_dim):
    half = rotary_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    z = (vec[:half] + 1j * vec[half:rotary_dim]) * np.exp(1j * pos * freqs)
    return np.concatenate([z.real, z.imag, vec[rotary_dim:]])


def _forward_token(model, tok, pos, store):
    """One token through every layer; ``store[l][g]`` is a list of (pos, k, v)."""
    c = model.config
    hd = c.head_dim
    g_size = c.n_q_heads // c.n_kv_heads
    x = model.embed[tok].astype(np.float64)
    for li, lw in enumerate(model.layers):
        h = _rms(x)
        q_all = h @ lw.wq
        k_all = h @ lw.wk
        v_all = h @ lw.wv
        for g in range(c.n_kv_heads):
            k = _rotate(k_all[g * hd:(g + 1) * hd], pos, c.rope_base, c.rotary_dim).astype(np.float32)
            v = v_all[g * hd:(g + 1) * hd].astype(np.float32)
            store[li][g].append((pos, k, v))
        heads = []
        for qh in range(c.n_q_heads):
            g = qh // g_size
            q = _rotate(q_all[qh * hd:(qh + 1) * hd], pos, c.rope_base, c.rotary_dim)
            entries = store[li][g]
            ks = np.array([e[1] for e in entries], dtype=np.float64)
            vs = np.array([e[2] for e in entries], dtype=np.float64)
            s = ks @ q / math.sqrt(hd)
            p = np.exp(s - s.max())
            p /= p.sum()
            heads.append(p @ vs)
        x = x + np.concatenate(heads) @ lw.wo
        x = x + _gelu(_rms(x) @ lw.w1) @ lw.w2
    return _rms(x) @ model.unembed


def naive_masked_generation(model, tokens, retained, steps: int) -> list[int]:
    """Greedy tokens after keeping only ``retained[(layer, kv_head)]`` prompt positions.

    The prompt is run causally one token at a time; the prompt's cache entries
    are then filtered by copying, and decoding continues without any mask.
    ``retained=None`` keeps everything.
    """
    c = model.config
    store = [[[] for _ in range(c.n_kv_heads)] for _ in range(c.n_layers)]
    tokens = [int(t) for t in tokens]
    # the prompt must see its full causal context, so collect K/V first
    for pos, tok in enumerate(tokens[:-1]):
        _forward_token(model, tok, pos, store)
    logits = _forward_token(model, tokens[-1], len(tokens) - 1, store)
    if retained is not None:
        for li in range(c.n_layers):
            for g in range(c.n_kv_heads):
                keep = {int(p) for p in retained[(li, g)]}
                store[li][g] = [e for e in store[li][g] if e[0] in keep]
    out = []
    pos = len(tokens)
    for t in range(steps):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if t == steps - 1:
            break
        logits = _forward_token(model, nxt, pos, store)
        pos += 1
    return out


# ---------------------------------------------------------------------------
# randomized suites


def random_softmax_row(rng: np.random.Generator, n: int) -> np.ndarray:
    temp = rng.uniform(0.25, 6.0)
    z = rng.standard_normal(n) * temp
    e = np.exp(z - z.max())
    return e / e.sum()


def halt_suite(cases: int, max_n: int, seed: int, thresholds=(0.0, 1e-3, 1e-2, 1e-1, 1.0),
               sink: int = 4):
    """Cumsum halting vs. per-prefix recomputation; returns the mismatch reports."""
    rng = np.random.default_rng(seed)
    mismatches = []
    for case in range(cases):
        n = int(rng.integers(1, max_n + 1))
        row = random_softmax_row(rng, n)
        order = rank_positions(n, sink)
        losses = prefix_losses(row, order)
        for t in thresholds:
            fast = halt_index(row, order, t).i_prune
            slow = first_below(losses, t)
            if fast != slow:
                mismatches.append(
                    OracleReport(
                        case={"suite": "halt", "case": case, "n": n, "threshold": t,
                              "sink": sink, "row": row.tolist()},
                        fast=fast, oracle=slow, agree=False, discrepancy=abs(fast - slow),
                    )
                )
    return mismatches


def bound_suite(cases: int, max_n: int, seed: int, threshold: float = 0.01, sink: int = 4):
    """Exhaustive optimum vs. the ranked-prefix halting index."""
    rng = np.random.default_rng(seed)
    violations = []
    for case in range(cases):
        n = int(rng.integers(1, max_n + 1))
        row = random_softmax_row(rng, n)
        order = rank_positions(n, sink)
        ranked = halt_index(row, order, threshold).i_prune
        best_any = exhaustive_min_subset(row, threshold, require_last=False)
        bad = best_any > ranked
        # a prefix that already holds position n - 1 is a feasible subset of the
        # restricted family too
        if n - 1 in order[:ranked]:
            best_last = exhaustive_min_subset(row, threshold, require_last=True)
            bad = bad or best_last > ranked
        if bad:
            violations.append(
                OracleReport(
                    case={"suite": "bound", "case": case, "n": n, "threshold": threshold,
                          "row": row.tolist()},
                    fast=ranked, oracle=best_any, agree=False,
                    discrepancy=float(best_any - ranked),
                )
            )
    return violations


def norm_identity_suite(cases: int, max_n: int, seed: int, rtol: float = 1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for case in range(cases):
        n = int(rng.integers(1, max_n + 1))
        row = random_softmax_row(rng, n)
        direct = math.sqrt(math.fsum(float(v) * float(v) for v in row))
        via_cumsum = math.sqrt(np.cumsum(row.astype(np.float64) ** 2)[-1])
        rel = abs(via_cumsum - direct) / direct
        worst = max(worst, rel)
        if not rel < rtol:
            failures.append(
                OracleReport(case={"suite": "norm", "case": case, "n": n},
                             fast=via_cumsum, oracle=direct, agree=False, discrepancy=rel)
            )
    return failures, worst
