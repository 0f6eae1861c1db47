"""Empirical sizes over the null grid, side by side with the bundled reference values.

    python3 scripts/run_size_tables.py --reps 10000 --j 2 --out sizes.csv
"""

import argparse
import csv
import math
import sys
from importlib import resources

from bilat.simulation import SIZE_J, SIZE_M, simulate, size_configs


def load_reference(name, key_col):
    with (resources.files("bilat") / "data" / name).open() as fh:
        return {
            (int(r["j"]), int(r["m"]), float(r[key_col]), r["gamma_case"], r["pi_case"], r["method"]):
                float(r["rejection_pct"])
            for r in csv.DictReader(fh)
        }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--j", type=int, nargs="+", default=list(SIZE_J))
    ap.add_argument("--m", type=int, nargs="+", default=list(SIZE_M))
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    ref = load_reference("reference_sizes.csv", "delta")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["j", "m", "delta", "gamma_case", "pi_case", "method", "ours", "reference", "z", "degenerate"])
    outside = total = 0
    for cfg in size_configs(js=args.j, ms=args.m, replications=args.reps, seed=args.seed):
        summ = simulate(cfg, args.workers)
        for meth, got in summ.rejection_pct.items():
            want = ref[(cfg.J, cfg.m, float(cfg.delta_spec), cfg.gamma_case, cfg.pi_case, meth)]
            se = 100.0 * math.sqrt(want / 100.0 * (1.0 - want / 100.0) / summ.valid_replications)
            z = (got - want) / se
            total += 1
            outside += abs(z) > 3.0
            w.writerow([cfg.J, cfg.m, cfg.delta_spec, cfg.gamma_case, cfg.pi_case, meth,
                        f"{got:.2f}", f"{want:.2f}", f"{z:.2f}", summ.degenerate_count])
        fh.flush()
    if args.out:
        fh.close()
    print(f"{outside}/{total} cells outside 3 se", file=sys.stderr)


if __name__ == "__main__":
    main()
