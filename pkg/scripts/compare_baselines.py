"""Norm halting against fixed-budget baselines on one prompt family.

The retrieval family with a weak next-token map is where the recency
baselines visibly lose the needle:

    python scripts/compare_baselines.py --family retrieval --next-token-bias 0.4
"""

import argparse

from kvprune.harness import RunConfig, cmd_compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--family", default="retrieval")
    ap.add_argument("--n-prompts", type=int, default=16)
    ap.add_argument("--budgets", default="0.9,0.5,0.2")
    ap.add_argument("--next-token-bias", type=float, default=1.0)
    ap.add_argument("--freeze-baseline-layers", action="store_true")
    ap.add_argument("--out", default="results/compare")
    args = ap.parse_args()

    cfg = RunConfig(family=args.family, n_prompts=args.n_prompts,
                    budgets=[float(b) for b in args.budgets.split(",")],
                    next_token_bias=args.next_token_bias,
                    freeze_baseline_layers=args.freeze_baseline_layers, out_dir=args.out)
    print(f"{'method':<10} {'setting':>7} {'budget':>8} {'agree':>7} {'max_dev':>10}")
    for r in cmd_compare(cfg):
        print(f"{r['method']:<10} {r['budget_setting']:>7} {r['mean_budget']:8.4f} "
              f"{r['agreement']:7.4f} {r['max_logit_dev']:10.3e}")


if __name__ == "__main__":
    main()
