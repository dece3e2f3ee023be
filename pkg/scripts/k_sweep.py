"""How many trailing attention rows feed the reduced row (k), at fixed T."""

import argparse
import csv
from pathlib import Path

from kvprune.harness import Method, RunConfig, evaluate, summarize

K_VALUES = [1, 2, 4, 8, 16, 0.01, 0.05, 0.1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--family", default="skewed")
    ap.add_argument("--threshold", type=float, default=0.01)
    ap.add_argument("--n-prompts", type=int, default=16)
    ap.add_argument("--out", default="results/k_sweep.csv")
    args = ap.parse_args()

    rows = []
    for k in K_VALUES:
        cfg = RunConfig(family=args.family, n_prompts=args.n_prompts, k_rows=k, threshold=args.threshold)
        s = summarize(evaluate(cfg, [Method("normhalt", args.threshold)])[0], cfg.n_layers)
        label = f"{k:g}" if isinstance(k, int) else f"{100 * k:g}%n"
        rows.append([label, f"{s['mean_budget']:.6f}", f"{s['agreement']:.6f}", f"{s['max_logit_dev']:.6e}"])
        print(f"k={label:<6} budget={s['mean_budget']:.4f} agreement={s['agreement']:.4f} "
              f"max_logit_dev={s['max_logit_dev']:.3e}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k_rows", "mean_budget", "agreement", "max_logit_dev"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
