"""Dense kernels: masked softmax and scaled-dot-product attention.

Matrices are plain numpy arrays. Storage may be float32, but every reduction
here runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


@dataclass(frozen=True)
class CausalMask:
    """Causal mask over ``seq_len`` positions, optionally with invalid (padded) keys.

    Query rows are taken to be the *last* rows of the sequence, so a mask can
    serve a full prefill (``n_queries == seq_len``) or a single decode row.
    """

    seq_len: int
    extra_invalid: np.ndarray | None = None

    def __post_init__(self):
        if self.seq_len < 1:
            raise DimensionError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.extra_invalid is not None:
            inv = np.asarray(self.extra_invalid, dtype=bool)
            if inv.shape != (self.seq_len,):
                raise DimensionError(
                    f"extra_invalid has shape {inv.shape}, expected ({self.seq_len},)"
                )
            object.__setattr__(self, "extra_invalid", inv)

    def allowed(self, n_queries: int | None = None) -> np.ndarray:
        n = self.seq_len
        q = n if n_queries is None else n_queries
        if not 1 <= q <= n:
            raise DimensionError(f"n_queries={q} outside [1, {n}]")
        rows = np.arange(n - q, n)[:, None]
        ok = np.arange(n)[None, :] <= rows
        if self.extra_invalid is not None:
            ok = ok & ~self.extra_invalid[None, :]
        return ok


def _as_allowed(scores: np.ndarray, mask) -> np.ndarray:
    if isinstance(mask, CausalMask):
        if scores.shape[-1] != mask.seq_len:
            raise DimensionError(
                f"scores have {scores.shape[-1]} columns, mask covers {mask.seq_len}"
            )
        return mask.allowed(scores.shape[-2])
    allowed = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(allowed.shape, scores.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {allowed.shape} vs scores {scores.shape}") from exc
    return allowed


def masked_softmax(scores, mask) -> np.ndarray:
    """Row softmax over attendable entries; everything else is exactly 0.

    ``mask`` is a :class:`CausalMask` or a boolean array broadcastable to
    ``scores``. Rows with no attendable entry come back all-zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim < 2:
        raise DimensionError(f"scores must be at least 2-D, got shape {scores.shape}")
    allowed = _as_allowed(scores, mask)
    neg = np.where(allowed, scores, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(np.where(allowed, scores - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def attention(q, k, v, mask, scale: float | None = None):
    """Scaled-dot-product attention. Returns ``(output, probs)``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    probs = masked_softmax(scores, mask)
    return probs @ v, probs
