"""Budget and agreement against T for each prompt family.

    python scripts/threshold_sweep.py --n-prompts 32 --out results/sweep
"""

import argparse
import csv
from pathlib import Path

from kvprune.harness import FAMILIES, RunConfig, cmd_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--families", default=",".join(FAMILIES))
    ap.add_argument("--thresholds", default="0.001,0.005,0.01,0.02,0.05,0.1")
    ap.add_argument("--n-prompts", type=int, default=32)
    ap.add_argument("--prompt-len", type=int, default=256)
    ap.add_argument("--next-token-bias", type=float, default=1.0)
    ap.add_argument("--out", default="results/sweep")
    args = ap.parse_args()

    out = Path(args.out)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    rows = []
    for fam in args.families.split(","):
        cfg = RunConfig(family=fam, n_prompts=args.n_prompts, prompt_len=args.prompt_len,
                        thresholds=thresholds, next_token_bias=args.next_token_bias,
                        out_dir=str(out / fam))
        for r in cmd_sweep(cfg):
            rows.append([fam, r.threshold, f"{r.mean_budget:.6f}", f"{r.agreement:.6f}"])
            print(f"{fam:<10} T={r.threshold:<6g} budget={r.mean_budget:.4f} agreement={r.agreement:.4f}")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "threshold", "mean_budget", "agreement"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
