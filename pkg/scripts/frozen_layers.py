"""Effect of keeping the bottom layers whole, for norm halting and for SLM."""

import argparse
import csv
from pathlib import Path

from kvprune.harness import Method, RunConfig, evaluate, summarize

FROZEN_SETS = [(), (0,), (0, 1), (0, 1, 2, 3)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--family", default="skewed")
    ap.add_argument("--n-prompts", type=int, default=16)
    ap.add_argument("--slm-budget", type=float, default=0.2)
    ap.add_argument("--out", default="results/frozen_layers.csv")
    args = ap.parse_args()

    rows = []
    for frozen in FROZEN_SETS:
        cfg = RunConfig(family=args.family, n_prompts=args.n_prompts, frozen_layers=list(frozen))
        methods = [Method("normhalt", cfg.threshold), Method("slm", budget=args.slm_budget, frozen=frozen)]
        for m, samples in zip(methods, evaluate(cfg, methods)):
            s = summarize(samples, cfg.n_layers)
            label = ";".join(map(str, frozen)) or "none"
            rows.append([m.kind, label, f"{s['mean_budget']:.6f}", f"{s['agreement']:.6f}",
                         f"{s['max_logit_dev']:.6e}"])
            print(f"{m.kind:<9} frozen={label:<8} budget={s['mean_budget']:.4f} "
                  f"agreement={s['agreement']:.4f} max_logit_dev={s['max_logit_dev']:.3e}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "frozen_layers", "mean_budget", "agreement", "max_logit_dev"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
