"""Experiment runs: full-cache vs. pruned generation on synthetic prompt families."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from kvprune.baselines import BudgetSpec, fixed_decisions
from kvprune.model import (
    ConfigError,
    Model,
    ModelConfig,
    build_model,
    greedy_decode,
    prefill,
    rms_norm,
)
from kvprune.pruner import (
    PruneDecision,
    PrunerConfig,
    apply_decisions,
    kv_head_rows,
    layer_budgets,
    mean_budget,
    prune_batch,
    prune_model,
)
from kvprune.traceio import (
    SweepRecord,
    check_trace_rows,
    emit_budget_csv,
    emit_sweep_csv,
    read_trace,
    write_trace,
)

BASELINES = ("slm", "h2o", "snapkv", "attn-rank")
FAMILIES = ("uniform", "skewed", "retrieval")


class UsageError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class InvariantError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # model
    n_layers: int = 8
    n_q_heads: int = 8
    n_kv_heads: int = 4
    head_dim: int = 32
    vocab_size: int = 512
    max_seq: int = 1024
    model_seed: int = 0
    qk_align: float = 0.95
    qk_gain: float = 0.9
    rotary_dim: int = 8
    next_token_bias: float = 1.0
    branch_gain: float = 0.4
    # pruner
    threshold: float = 0.01
    sink: int = 4
    k_rows: int | float = 1
    frozen_layers: list[int] = field(default_factory=lambda: [0, 1])
    min_retain_floor: int | None = None
    head_reduce: str = "mean"
    # baselines
    baseline: str | None = None
    budget: float = 0.5
    budgets: list[float] = field(default_factory=lambda: [0.9, 0.5, 0.2])
    freeze_baseline_layers: bool = False
    snap_window: int = 32
    # prompts and generation
    family: str = "skewed"
    n_prompts: int = 8
    prompt_len: int = 256
    prompt_file: str | None = None
    decode_steps: int = 16
    batch: int = 1
    seed: int = 0
    thresholds: list[float] = field(default_factory=lambda: [0.001, 0.005, 0.01, 0.02, 0.05, 0.1])
    agreement_floor: float = 0.95
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.baseline is not None and self.baseline not in BASELINES:
            raise UsageError("baseline", f"must be one of {BASELINES}, got {self.baseline!r}")
        if self.family not in FAMILIES:
            raise UsageError("family", f"must be one of {FAMILIES}, got {self.family!r}")
        if not 0.0 < self.budget <= 1.0:
            raise UsageError("budget", f"must lie in (0, 1], got {self.budget}")
        for b in self.budgets:
            if not 0.0 < b <= 1.0:
                raise UsageError("budgets", f"entries must lie in (0, 1], got {b}")
        if list(self.thresholds) != sorted(self.thresholds):
            raise UsageError("thresholds", "must be sorted ascending")
        for name in ("n_prompts", "prompt_len", "batch"):
            if getattr(self, name) < 1:
                raise UsageError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.decode_steps < 0:
            raise UsageError("decode_steps", f"must be >= 0, got {self.decode_steps}")
        try:
            self.model_config()
        except ConfigError as exc:
            raise UsageError("model", str(exc)) from exc
        try:
            self.pruner_config()
        except ConfigError as exc:
            raise UsageError("pruner", str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            n_q_heads=self.n_q_heads,
            n_kv_heads=self.n_kv_heads,
            head_dim=self.head_dim,
            vocab_size=self.vocab_size,
            max_seq=self.max_seq,
            seed=self.model_seed,
            qk_align=self.qk_align,
            qk_gain=self.qk_gain,
            rotary_dim=self.rotary_dim,
            next_token_bias=self.next_token_bias,
            branch_gain=self.branch_gain,
        )

    def pruner_config(self, threshold: float | None = None) -> PrunerConfig:
        return PrunerConfig(
            threshold=self.threshold if threshold is None else threshold,
            sink=self.sink,
            k_rows=self.k_rows,
            frozen_layers=frozenset(self.frozen_layers),
            min_retain_floor=self.min_retain_floor,
            head_reduce=self.head_reduce,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(unknown[0], "unknown config field")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# prompt families

SKEW_SINK_COPIES = 4
SKEW_TAIL_COPIES = 16
NEEDLE_COPIES = 16


def uniform_prompt(rng: np.random.Generator, n: int, vocab: int) -> np.ndarray:
    """Independent uniform tokens: attention has no structure to exploit."""
    return rng.integers(1, vocab, n)


def skewed_prompt(rng: np.random.Generator, n: int, vocab: int) -> np.ndarray:
    """One filler token repeated, with the query token at the sinks and the tail.

    Token-matching heads then concentrate on the first and last positions,
    which is where position ranking looks first.
    """
    a, b = rng.choice(np.arange(1, vocab), 2, replace=False)
    t = np.full(n, b, dtype=np.int64)
    t[: min(SKEW_SINK_COPIES, n)] = a
    t[max(n - SKEW_TAIL_COPIES, 0):] = a
    return t


def partner_token(model: Model, token: int) -> int:
    """Token whose layer-0 keys best match ``token``'s queries (position-free dims)."""
    c = model.config
    rd, hd = c.rotary_dim, c.head_dim
    lw = model.layers[0]
    e = rms_norm(model.embed)
    q = (e[token] @ lw.wq).reshape(c.n_q_heads, hd)[:, rd:]
    k = (e @ lw.wk).reshape(-1, c.n_kv_heads, hd)[:, model.kv_of_q, rd:]
    aff = np.einsum("hd,vhd->v", q, k)
    aff[token] = -np.inf
    aff[0] = -np.inf
    return int(np.argmax(aff))


def retrieval_prompt(rng: np.random.Generator, n: int, model: Model) -> np.ndarray:
    """Random filler with a block of 'needle' tokens in the middle of the prompt.

    The final (query) token is chosen so that its queries match the needle's
    keys, so the needle sits far from both the sinks and the recent window.
    """
    vocab = model.config.vocab_size
    t = rng.integers(1, vocab, n)
    q = int(rng.integers(1, vocab))
    needle = partner_token(model, q)
    start = max((n - NEEDLE_COPIES) // 2, 0)
    t[start:start + NEEDLE_COPIES] = needle
    t[-1] = q
    return t


def make_prompts(cfg: RunConfig, model: Model) -> list[np.ndarray]:
    if cfg.prompt_file:
        return read_prompt_file(cfg.prompt_file)
    out = []
    for i in range(cfg.n_prompts):
        rng = np.random.default_rng([cfg.seed, i])
        if cfg.family == "uniform":
            out.append(uniform_prompt(rng, cfg.prompt_len, cfg.vocab_size))
        elif cfg.family == "skewed":
            out.append(skewed_prompt(rng, cfg.prompt_len, cfg.vocab_size))
        else:
            out.append(retrieval_prompt(rng, cfg.prompt_len, model))
    return out


def read_prompt_file(path) -> list[np.ndarray]:
    """One prompt per non-empty line; token ids separated by spaces or commas."""
    prompts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            prompts.append(np.array([int(x) for x in line.replace(",", " ").split()], dtype=np.int64))
        except ValueError as exc:
            raise UsageError("prompt_file", f"line {lineno}: {exc}") from exc
    if not prompts:
        raise UsageError("prompt_file", "no prompts found")
    return prompts


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Method:
    """A pruning policy: norm halting (``kind='normhalt'``) or a baseline."""

    kind: str
    threshold: float = 0.01
    budget: float = 1.0
    frozen: tuple[int, ...] = ()

    @property
    def label(self) -> str:
        return self.kind


@dataclass
class SampleResult:
    decisions: list[PruneDecision]
    tokens_full: np.ndarray
    tokens_pruned: np.ndarray
    agreement: float
    max_logit_dev: float
    prune_seconds: float
    generate_seconds: float

    @property
    def mean_budget(self) -> float:
        return mean_budget(self.decisions)


@dataclass
class Prefilled:
    tokens: np.ndarray
    cache: object
    logits: np.ndarray
    rows: np.ndarray  # kv-head rows, float32, (n_layers, n_kv_heads, k, n)
    full_tokens: np.ndarray
    full_logits: np.ndarray


def rows_needed(cfg: RunConfig, n: int, methods) -> int:
    k = cfg.pruner_config().resolve_k(n)
    for m in methods:
        if m.kind == "h2o":
            k = max(k, n)
        elif m.kind == "snapkv":
            k = max(k, min(cfg.snap_window, n))
    return min(k, n)


def prefill_sample(model: Model, cfg: RunConfig, tokens, keep_rows: int) -> Prefilled:
    cache, out = prefill(model, tokens, keep_rows=keep_rows)
    rows = kv_head_rows(out.last_attention_rows, model.config.n_kv_heads, cfg.head_reduce)
    full_tokens, full_logits = greedy_decode(model, cache.copy(), out.logits, cfg.decode_steps)
    return Prefilled(np.asarray(tokens), cache, out.logits, rows, full_tokens, full_logits)


def decide(method: Method, rows: np.ndarray, cfg: RunConfig) -> list[PruneDecision]:
    if method.kind == "normhalt":
        pc = cfg.pruner_config(method.threshold)
        k = pc.resolve_k(rows.shape[-1])
        return prune_model(rows[:, :, rows.shape[2] - k:], pc)
    k = cfg.pruner_config().resolve_k(rows.shape[-1])
    return fixed_decisions(
        method.kind,
        rows,
        BudgetSpec("fraction", method.budget),
        frozen_layers=method.frozen,
        sink=cfg.sink,
        window=cfg.snap_window,
        threshold=method.threshold,
        k_rows=k,
    )


def compare_generations(full_tokens, full_logits, tokens, logits) -> tuple[float, float]:
    """Greedy-token agreement and max |logit| deviation.

    Logit deviation is taken over the steps whose inputs still agree.
    """
    if len(full_tokens) == 0:
        return 1.0, 0.0
    same = np.asarray(full_tokens) == np.asarray(tokens)
    diverge = np.flatnonzero(~same)
    last = diverge[0] + 1 if diverge.size else len(same)
    dev = float(np.abs(np.asarray(full_logits)[:last] - np.asarray(logits)[:last]).max())
    return float(same.mean()), dev


def run_method(model: Model, pre: Prefilled, method: Method, cfg: RunConfig) -> SampleResult:
    t0 = time.perf_counter()
    decisions = decide(method, pre.rows, cfg)
    pruned = apply_decisions(pre.cache, decisions)
    t1 = time.perf_counter()
    toks, logits = greedy_decode(model, pruned, pre.logits, cfg.decode_steps)
    t2 = time.perf_counter()
    agree, dev = compare_generations(pre.full_tokens, pre.full_logits, toks, logits)
    return SampleResult(decisions, pre.full_tokens, toks, agree, dev, t1 - t0, t2 - t1)


def run_batched(model: Model, pres: list[Prefilled], cfg: RunConfig, threshold: float):
    """Prune a batch with padding and decode it as one batch."""
    pc = cfg.pruner_config(threshold)
    rows = []
    for p in pres:
        k = pc.resolve_k(p.rows.shape[-1])
        rows.append(p.rows[:, :, p.rows.shape[2] - k:])
    t0 = time.perf_counter()
    res = prune_batch([p.cache for p in pres], rows, pc)
    t1 = time.perf_counter()
    first = np.stack([p.logits for p in pres])
    toks, logits = greedy_decode(model, res.cache, first, cfg.decode_steps)
    t2 = time.perf_counter()
    out = []
    for b, p in enumerate(pres):
        agree, dev = compare_generations(p.full_tokens, p.full_logits, toks[b], logits[b])
        out.append(SampleResult(res.decisions[b], p.full_tokens, toks[b], agree, dev,
                                (t1 - t0) / len(pres), (t2 - t1) / len(pres)))
    return out


def main_method(cfg: RunConfig, threshold: float | None = None) -> Method:
    t = cfg.threshold if threshold is None else threshold
    if cfg.baseline is None:
        return Method("normhalt", threshold=t)
    frozen = tuple(cfg.frozen_layers) if cfg.freeze_baseline_layers else ()
    return Method(cfg.baseline, threshold=t, budget=cfg.budget, frozen=frozen)


def evaluate(cfg: RunConfig, methods, model: Model | None = None, prompts=None):
    """Results[method_index][sample_index] for every method over every prompt."""
    model = model or build_model(cfg.model_config())
    prompts = prompts if prompts is not None else make_prompts(cfg, model)
    results = [[] for _ in methods]
    batched = cfg.batch > 1 and all(m.kind == "normhalt" for m in methods)
    for start in range(0, len(prompts), cfg.batch if batched else 1):
        chunk = prompts[start:start + (cfg.batch if batched else 1)]
        pres = [prefill_sample(model, cfg, t, rows_needed(cfg, len(t), methods)) for t in chunk]
        for mi, m in enumerate(methods):
            if batched:
                results[mi].extend(run_batched(model, pres, cfg, m.threshold))
            else:
                results[mi].extend(run_method(model, p, m, cfg) for p in pres)
    return results


def summarize(samples: list[SampleResult], n_layers: int) -> dict:
    decisions = [d for s in samples for d in s.decisions]
    return {
        "mean_budget": mean_budget(decisions),
        "per_layer_budgets": layer_budgets(decisions, n_layers),
        "agreement": float(np.mean([s.agreement for s in samples])),
        "max_logit_dev": float(max(s.max_logit_dev for s in samples)),
        "prune_seconds_per_sample": float(np.mean([s.prune_seconds for s in samples])),
        "generate_seconds_per_sample": float(np.mean([s.generate_seconds for s in samples])),
    }


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: RunConfig, dump_trace: bool = False) -> dict:
    model = build_model(cfg.model_config())
    prompts = make_prompts(cfg, model)
    method = main_method(cfg)
    samples = evaluate(cfg, [method], model, prompts)[0]
    out = _out_dir(cfg)
    emit_budget_csv([s.decisions for s in samples], out / "budgets.csv")
    if dump_trace:
        pc = cfg.pruner_config()
        for i, t in enumerate(prompts):
            k = pc.resolve_k(len(t))
            _, o = prefill(model, t, keep_rows=k)
            write_trace(kv_head_rows(o.last_attention_rows, cfg.n_kv_heads, cfg.head_reduce),
                        out / f"trace_{i:04d}.kvpt")
    report = {
        "method": method.label,
        "threshold": cfg.threshold,
        "n_samples": len(samples),
        **summarize(samples, cfg.n_layers),
        "agreement_floor": cfg.agreement_floor,
        "per_sample": [
            {"mean_budget": s.mean_budget, "agreement": s.agreement, "max_logit_dev": s.max_logit_dev}
            for s in samples
        ],
        "timing_note": "CPU numpy timings; not comparable to GPU measurements",
    }
    report["agreement_ok"] = report["agreement"] >= cfg.agreement_floor
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def check_monotone(records: list[SweepRecord]) -> None:
    for a, b in zip(records, records[1:]):
        if b.mean_budget > a.mean_budget:
            raise InvariantError(
                f"mean budget rose from {a.mean_budget:.6f} at T={a.threshold} "
                f"to {b.mean_budget:.6f} at T={b.threshold}"
            )


def cmd_sweep(cfg: RunConfig, thresholds=None) -> list[SweepRecord]:
    thresholds = list(cfg.thresholds if thresholds is None else thresholds)
    if thresholds != sorted(thresholds):
        raise UsageError("thresholds", "must be sorted ascending")
    methods = [main_method(cfg, t) for t in thresholds]
    results = evaluate(cfg, methods)
    records = []
    for t, samples in zip(thresholds, results):
        s = summarize(samples, cfg.n_layers)
        records.append(SweepRecord(t, s["mean_budget"], s["agreement"], s["per_layer_budgets"]))
    check_monotone(records)
    emit_sweep_csv(records, _out_dir(cfg) / "sweep.csv")
    return records


COMPARE_HEADER = ["method", "frozen_layers", "budget_setting", "mean_budget", "agreement", "max_logit_dev"]


def compare_methods(cfg: RunConfig) -> list[Method]:
    frozen = tuple(cfg.frozen_layers) if cfg.freeze_baseline_layers else ()
    methods = [Method("normhalt", threshold=cfg.threshold),
               Method("attn-rank", threshold=cfg.threshold, frozen=tuple(cfg.frozen_layers))]
    for kind in ("slm", "h2o", "snapkv"):
        for b in cfg.budgets:
            methods.append(Method(kind, budget=b, frozen=frozen))
    return methods


def cmd_compare(cfg: RunConfig) -> list[dict]:
    methods = compare_methods(cfg)
    results = evaluate(cfg, methods)
    rows = []
    for m, samples in zip(methods, results):
        s = summarize(samples, cfg.n_layers)
        auto = m.kind in ("normhalt", "attn-rank")
        rows.append({
            "method": m.label,
            "frozen_layers": ";".join(str(x) for x in (cfg.frozen_layers if m.kind == "normhalt" else m.frozen)),
            "budget_setting": "auto" if auto else f"{m.budget:.2f}",
            "mean_budget": s["mean_budget"],
            "agreement": s["agreement"],
            "max_logit_dev": s["max_logit_dev"],
        })
    with open(_out_dir(cfg) / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([r["method"], r["frozen_layers"], r["budget_setting"], f"{r['mean_budget']:.6f}",
                        f"{r['agreement']:.6f}", f"{r['max_logit_dev']:.6e}"])
    return rows


def analyze_trace(rows: np.ndarray, cfg: RunConfig, thresholds=None):
    """Decisions at ``cfg.threshold`` plus a budget-only sweep, from stored rows."""
    pc = cfg.pruner_config()
    n = rows.shape[-1]
    k = pc.resolve_k(n)
    if k > rows.shape[2]:
        raise UsageError("k_rows", f"trace holds {rows.shape[2]} rows, {k} requested")
    sub = rows[:, :, rows.shape[2] - k:]
    decisions = prune_model(sub, pc)
    records = []
    for t in (cfg.thresholds if thresholds is None else thresholds):
        d = prune_model(sub, cfg.pruner_config(t))
        records.append(SweepRecord(t, mean_budget(d), None, layer_budgets(d, rows.shape[0])))
    check_monotone(records)
    return decisions, records


def cmd_analyze_trace(path, cfg: RunConfig):
    rows = read_trace(path)
    check_trace_rows(rows)
    decisions, records = analyze_trace(rows, cfg)
    out = _out_dir(cfg)
    emit_budget_csv(decisions, out / "budgets.csv")
    emit_sweep_csv(records, out / "trace_sweep.csv")
    return decisions, records
