"""Random parameter sweep of empirical sizes, summarized per method.

Writes one CSV row per configuration and method (suitable for box or violin
plots) and prints the median and interquartile range of each method.

    python3 scripts/run_sweep.py --configs 200 --j 2 --m 50 --reps 2000 --out sweep.csv
"""

import argparse
import csv
import sys

import numpy as np

from bilat.simulation import DEFAULT_BOUNDS, METHODS, random_sweep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", type=int, default=1000)
    ap.add_argument("--j", type=int, default=2)
    ap.add_argument("--m", type=int, default=50)
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    rows = random_sweep(args.configs, args.j, args.m, dict(DEFAULT_BOUNDS), replications=args.reps,
                        seed=args.seed, workers=args.workers)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["config", "pi1", "gamma", "delta", "method", "rejection_pct"])
    rates = {meth: [] for meth in METHODS}
    for k, summ in enumerate(rows):
        c = summ.config
        for meth in METHODS:
            rates[meth].append(summ.rejection_pct[meth])
            w.writerow([k, ";".join(f"{v:.4f}" for v in c.pi1_vec), ";".join(f"{v:.4f}" for v in c.gamma_vec),
                        f"{c.delta_vec[0]:.4f}", meth, f"{summ.rejection_pct[meth]:.2f}"])
    if args.out:
        fh.close()
    for meth, v in rates.items():
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        print(f"{meth}: median {med:.2f}, IQR {q3 - q1:.2f}", file=sys.stderr)


if __name__ == "__main__":
    main()
