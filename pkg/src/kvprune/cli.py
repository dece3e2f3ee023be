"""Command-line entry point: ``kvprune <subcommand> [flags]``.

Exit codes: 0 success, 1 usage, 2 oracle/invariant failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

from kvprune import oracle
from kvprune.harness import (
    BASELINES,
    FAMILIES,
    InvariantError,
    RunConfig,
    UsageError,
    cmd_analyze_trace,
    cmd_compare,
    cmd_generate,
    cmd_sweep,
)
from kvprune.traceio import TraceFormatError

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _k_rows(text: str):
    # "1", "4", "0.01" (fraction of n) or "1%n"
    t = text.strip()
    if t.endswith("%n"):
        return float(t[:-2]) / 100.0
    v = float(t)
    return int(v) if v.is_integer() else v


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--threshold", type=float)
    p.add_argument("--sink", type=int)
    p.add_argument("--k-rows", type=_k_rows, dest="k_rows")
    p.add_argument("--frozen-layers", type=_ints, dest="frozen_layers",
                   help="comma-separated layer indices; empty string freezes none")
    p.add_argument("--min-retain-floor", type=int, dest="min_retain_floor")
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--budget", type=float)
    p.add_argument("--budgets", type=_floats)
    p.add_argument("--freeze-baseline-layers", action="store_true", default=None,
                   dest="freeze_baseline_layers")
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--model-seed", type=int, dest="model_seed")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--next-token-bias", type=float, dest="next_token_bias",
                   help="strength of the fixed next-token map; lower values make output context-dependent")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--n-prompts", type=int, dest="n_prompts")
    p.add_argument("--prompt-len", type=int, dest="prompt_len")
    p.add_argument("--prompt-file", dest="prompt_file")
    p.add_argument("--decode-steps", type=int, dest="decode_steps")
    p.add_argument("--thresholds", type=_floats)
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="full-cache vs pruned generation")
    _run_flags(g)
    g.add_argument("--dump-trace", action="store_true", help="also write one attention trace per prompt")

    s = sub.add_parser("sweep", help="threshold sweep (budget and agreement per threshold)")
    _run_flags(s)

    c = sub.add_parser("compare", help="norm halting vs fixed-budget baselines")
    _run_flags(c)

    a = sub.add_parser("analyze-trace", help="budgets from a stored attention trace")
    a.add_argument("trace")
    _run_flags(a)

    o = sub.add_parser("oracle-check", help="run the brute-force oracle suites")
    o.add_argument("--cases", type=int, default=10_000)
    o.add_argument("--max-n", type=int, default=128)
    o.add_argument("--enumerate-n", type=int, default=12)
    o.add_argument("--enumerate-cases", type=int, default=500)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--sink", type=int, default=4)
    o.add_argument("--verbose", action="store_true", help="also emit one line per passing suite")
    return parser


def resolve_config(args) -> RunConfig:
    data = RunConfig().to_dict()
    if args.config:
        data.update(json.loads(Path(args.config).read_text()))
    names = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


def _oracle_check(args, out) -> int:
    t0 = time.perf_counter()
    bad = 0
    halt = oracle.halt_suite(args.cases, args.max_n, args.seed, sink=args.sink)
    norm_fail, worst = oracle.norm_identity_suite(min(args.cases, 1000), args.max_n, args.seed + 1)
    bound = oracle.bound_suite(args.enumerate_cases, args.enumerate_n, args.seed + 2, sink=args.sink)
    for name, failures, extra in (
        ("halt", halt, {"cases": args.cases, "max_n": args.max_n}),
        ("norm", norm_fail, {"worst_rel": worst}),
        ("bound", bound, {"cases": args.enumerate_cases, "enumerate_n": args.enumerate_n}),
    ):
        for r in failures:
            print(r.to_json(), file=out)
        bad += len(failures)
        summary = oracle.OracleReport(
            case={"suite": name, "summary": True, **extra},
            fast=None, oracle=None, agree=not failures, discrepancy=float(len(failures)),
        )
        if failures or args.verbose:
            print(summary.to_json(), file=out)
    print(json.dumps({"mismatches": bad, "seconds": round(time.perf_counter() - t0, 3)}), file=out)
    return EXIT_FAIL if bad else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "oracle-check":
            return _oracle_check(args, sys.stdout)
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_json())
            return EXIT_OK
        if args.command == "generate":
            report = cmd_generate(cfg, dump_trace=args.dump_trace)
            print(json.dumps({k: v for k, v in report.items() if k != "per_sample"}, indent=2, sort_keys=True))
        elif args.command == "sweep":
            for r in cmd_sweep(cfg):
                print(f"T={r.threshold:<8g} budget={r.mean_budget:.4f} agreement={r.agreement:.4f}")
        elif args.command == "compare":
            for r in cmd_compare(cfg):
                print(f"{r['method']:<10} {r['budget_setting']:>5} budget={r['mean_budget']:.4f} "
                      f"agreement={r['agreement']:.4f} max_logit_dev={r['max_logit_dev']:.3e}")
        elif args.command == "analyze-trace":
            decisions, records = cmd_analyze_trace(args.trace, cfg)
            budget = sum(d.budget for d in decisions) / len(decisions)
            print(f"mean budget at T={cfg.threshold}: {budget:.6f} over {len(decisions)} heads")
    except UsageError as exc:
        print(f"kvprune: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"kvprune: invariant violated: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, TraceFormatError) as exc:
        print(f"kvprune: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
