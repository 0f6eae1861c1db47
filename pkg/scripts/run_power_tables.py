"""Empirical power under alternating ratios, compared with the bundled reference values.

    python3 scripts/run_power_tables.py --reps 10000 --j 2 4
    python3 scripts/run_power_tables.py --delta-vector 0.5,0.5,1.4 --j 6 --no-reference
"""

import argparse
import csv
import sys

from bilat.simulation import POWER_DELTA0, POWER_DELTA_A, SIZE_J, SIZE_M, power_configs, simulate

from run_size_tables import load_reference


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--j", type=int, nargs="+", default=list(SIZE_J))
    ap.add_argument("--m", type=int, nargs="+", default=list(SIZE_M))
    ap.add_argument("--delta0", type=float, default=POWER_DELTA0)
    ap.add_argument("--delta-a", type=float, nargs="+", default=list(POWER_DELTA_A))
    ap.add_argument("--delta-vector", default=None, help="explicit ratios, comma separated, cycled to J")
    ap.add_argument("--no-reference", action="store_true", help="skip the reference columns")
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    vector = None if args.delta_vector is None else [float(v) for v in args.delta_vector.split(",")]
    use_ref = vector is None and not args.no_reference and args.delta0 == POWER_DELTA0
    ref = load_reference("reference_power.csv", "delta_a") if use_ref else {}
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["j", "m", "delta_spec", "gamma_case", "pi_case", "method", "ours", "se", "reference", "diff"])
    cfgs = power_configs(js=args.j, ms=args.m, delta_a=args.delta_a, delta0=args.delta0,
                         replications=args.reps, seed=args.seed, delta_vector=vector)
    for cfg in cfgs:
        summ = simulate(cfg, args.workers)
        for meth, got in summ.rejection_pct.items():
            row = [cfg.J, cfg.m, cfg.delta_spec, cfg.gamma_case, cfg.pi_case, meth,
                   f"{got:.2f}", f"{summ.se_pct[meth]:.2f}"]
            if use_ref:
                da = float(cfg.delta_spec.split("/")[1])
                want = ref.get((cfg.J, cfg.m, da, cfg.gamma_case, cfg.pi_case, meth))
                row += ["" if want is None else f"{want:.2f}", "" if want is None else f"{got - want:.2f}"]
            else:
                row += ["", ""]
            w.writerow(row)
        fh.flush()
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
