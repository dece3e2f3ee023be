"""Attention-trace binary files and budget/sweep CSVs.

Trace layout (little-endian)::

    offset  size  field
    0       4     magic b"KVPT"
    4       4     version (u32) = 1
    8       4     n_layers (u32)
    12      4     n_kv_heads (u32)
    16      4     seq_len (u32)
    20      4     k_rows (u32)
    24      ...   n_layers * n_kv_heads * k_rows * seq_len float32, C order

Each block holds the last ``k_rows`` attention rows of one (layer, kv head),
with exact zeros on causally masked entries.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"KVPT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class TraceFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def write_trace(rows, path) -> None:
    """Write rows of shape (n_layers, n_kv_heads, k_rows, seq_len)."""
    arr = np.asarray(rows)
    if arr.ndim != 4:
        raise TraceFormatError(f"trace rows must be 4-D, got shape {arr.shape}")
    n_layers, n_heads, k_rows, seq_len = arr.shape
    if k_rows > seq_len or min(arr.shape) < 1:
        raise TraceFormatError(f"invalid trace shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_layers, n_heads, seq_len, k_rows))
        fh.write(data.tobytes())


def read_trace(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TraceFormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}", offset=len(raw)
        )
    magic, version, n_layers, n_heads, seq_len, k_rows = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported trace version {version}", offset=4)
    if k_rows > seq_len or 0 in (n_layers, n_heads, seq_len, k_rows):
        raise TraceFormatError(
            f"inconsistent header: layers={n_layers} heads={n_heads} "
            f"seq_len={seq_len} k_rows={k_rows}",
            offset=8,
        )
    expected = _HEADER.size + 4 * n_layers * n_heads * k_rows * seq_len
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise TraceFormatError(
            f"{kind} file: header implies {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(n_layers, n_heads, k_rows, seq_len).astype(np.float32)


def check_trace_rows(rows, atol: float = 1e-4) -> None:
    """Every row must sum to 1 (within ``atol``) or be all zero."""
    sums = np.asarray(rows, dtype=np.float64).sum(axis=-1)
    bad = ~((np.abs(sums - 1.0) <= atol) | (sums == 0.0))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise TraceFormatError(f"row {idx} sums to {sums[idx]:.6g}")


BUDGET_HEADER = ["sample_id", "layer", "head", "retained", "total", "budget"]


def _budget_text(b: float) -> str:
    # six decimals when exact, otherwise the shortest round-trip form
    text = f"{b:.6f}"
    return text if float(text) == b else repr(float(b))


def emit_budget_csv(decisions, path) -> None:
    """Write one row per decision.

    ``decisions`` is a list of per-sample decision lists, or a flat list for a
    single sample (id 0). Rows are sorted by (sample, layer, head).
    """
    if not decisions:
        raise ValueError("no decisions to write")
    if not isinstance(decisions[0], (list, tuple)):
        decisions = [decisions]
    rows = []
    for sid, sample in enumerate(decisions):
        for d in sample:
            rows.append((sid, d.layer, d.head, d.i_prune, d.n, d.budget))
    rows.sort(key=lambda r: r[:3])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BUDGET_HEADER)
        for sid, layer, head, kept, total, budget in rows:
            w.writerow([sid, layer, head, kept, total, _budget_text(budget)])


def read_budget_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class SweepRecord:
    threshold: float
    mean_budget: float
    agreement: float | None
    per_layer_budgets: list[float]

    def __post_init__(self):
        if not 0.0 < self.mean_budget <= 1.0:
            raise ValueError(f"mean_budget {self.mean_budget} outside (0, 1]")
        if self.agreement is not None and not 0.0 <= self.agreement <= 1.0:
            raise ValueError(f"agreement {self.agreement} outside [0, 1]")


def emit_sweep_csv(records: list[SweepRecord], path) -> None:
    """Columns: threshold, mean_budget, agreement, layer_0 .. layer_{L-1}.

    ``agreement`` is left empty for sweeps run without a model (trace analysis).
    """
    n_layers = len(records[0].per_layer_budgets) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_budget", "agreement"] + [f"layer_{i}" for i in range(n_layers)])
        for r in records:
            agree = "" if r.agreement is None else f"{r.agreement:.6f}"
            w.writerow(
                [f"{r.threshold:.6g}", f"{r.mean_budget:.6f}", agree]
                + [f"{b:.6f}" for b in r.per_layer_budgets]
            )
