"""Command-line interface.

``bilat test FILE`` fits both models to a count table and reports the three
homogeneity tests. ``bilat simulate size|power|sweep`` runs Monte Carlo grids
and writes one CSV row per (configuration, method).

Count files are CSV with header ``stratum,group,m0,m1,m2``: two rows per
stratum, group 1 being the reference (denominator of the ratio) and group 2
the comparison; m0/m1/m2 count patients with 0/1/2 responding sites.

Exit codes: 0 success, 1 usage or parse error, 2 statistically degenerate data.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from importlib import resources
from typing import IO, Sequence

from .estimation import NoFeasibleSolutionError
from .inference import METHODS, SingularInformationError, homogeneity_tests
from .model import DegenerateTableError, ParameterError, StratifiedTable, StratumCounts
from .simulation import (
    GAMMA_CASES,
    PI_CASES,
    POWER_DELTA0,
    POWER_DELTA_A,
    SIZE_DELTAS,
    SIZE_J,
    SIZE_M,
    ResamplingExhausted,
    power_configs,
    simulate,
    size_configs,
    sweep_configs,
)

EXIT_OK, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2

HEADER = ("stratum", "group", "m0", "m1", "m2")
SIM_COLUMNS = ("j", "m", "delta_spec", "gamma_case", "pi_case", "method",
               "rejection_pct", "se_pct", "degenerate_count", "reps", "seed")
METHOD_FLAGS = {"lrt": "LRT", "score": "Score", "wald": "Wald"}


class ParseError(ValueError):
    pass


# ------------------------------------------------------------------ #
# count files
# ------------------------------------------------------------------ #


def bundled_ome_path():
    """Path-like handle to the bundled otitis media example table."""
    return resources.files("bilat").joinpath("data/ome.csv")


def parse_table(text: str, source: str = "<input>") -> StratifiedTable:
    """Parse count-file text; strata keep their order of first appearance."""
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    if not rows:
        raise ParseError(f"{source}: empty file")
    header = tuple(c.strip().lower() for c in rows[0])
    if header != HEADER:
        raise ParseError(f"{source}:1: expected header {','.join(HEADER)}, got {','.join(rows[0])}")
    groups: dict[str, dict[int, tuple[int, int, int]]] = {}
    first_line: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise ParseError(f"{source}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
        label = row[0].strip()
        if not label:
            raise ParseError(f"{source}:{lineno}:1: empty stratum label")
        try:
            group = int(row[1])
        except ValueError:
            raise ParseError(f"{source}:{lineno}:2: group must be 1 or 2, got {row[1]!r}") from None
        if group not in (1, 2):
            raise ParseError(f"{source}:{lineno}:2: group must be 1 or 2, got {group}")
        vals = []
        for col in range(2, 5):
            try:
                v = int(row[col])
            except ValueError:
                v = -1
            if v < 0:
                raise ParseError(
                    f"{source}:{lineno}:{col + 1}: {HEADER[col]} must be a nonnegative integer, got {row[col]!r}"
                )
            vals.append(v)
        entry = groups.setdefault(label, {})
        first_line.setdefault(label, lineno)
        if len(entry) >= 2 or group in entry:
            n_rows = sum(1 for r in rows[1:] if r and r[0].strip() == label)
            raise ParseError(
                f"{source}:{lineno}: stratum {label!r} has {n_rows} rows; expected exactly 2 (groups 1 and 2)"
            )
        entry[group] = tuple(vals)
    strata = []
    for label, entry in groups.items():
        if set(entry) != {1, 2}:
            raise ParseError(f"{source}:{first_line[label]}: stratum {label!r} needs one row for each of groups 1 and 2")
        try:
            strata.append(StratumCounts.from_groups(entry[1], entry[2]))
        except ValueError as exc:
            raise ParseError(f"{source}:{first_line[label]}: stratum {label!r}: {exc}") from None
    if not strata:
        raise ParseError(f"{source}: no data rows")
    return StratifiedTable(tuple(strata), tuple(groups))


def read_table(path) -> StratifiedTable:
    with open(path, newline="") as fh:
        return parse_table(fh.read(), str(path))


def write_table(table: StratifiedTable, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(HEADER)
    for label, s in zip(table.stratum_labels(), table.strata):
        w.writerow((label, 1, *s.group1))
        w.writerow((label, 2, *s.group2))


# ------------------------------------------------------------------ #
# test command
# ------------------------------------------------------------------ #


def _report_json(table, report) -> str:
    g, c = report.global_fit, report.constrained_fit
    labels = table.stratum_labels()
    payload = {
        "results": [
            {"method": r.method, "statistic": r.statistic, "df": r.df, "p_value": r.p_value}
            for r in report.results.values()
        ],
        "global_fit": {
            "strata": [
                {"stratum": lab, "pi1": p, "gamma": gm, "delta": d}
                for lab, p, gm, d in zip(labels, g.pi1_tilde, g.gamma_tilde, g.delta_tilde)
            ],
            "loglik": g.loglik,
        },
        "constrained_fit": {
            "delta": c.delta_hat,
            "strata": [
                {"stratum": lab, "pi1": p, "gamma": gm, "boundary": j in c.boundary_strata}
                for j, (lab, p, gm) in enumerate(zip(labels, c.pi1_hat, c.gamma_hat))
            ],
            "loglik": c.loglik,
            "iterations": c.iterations,
            "converged": c.converged,
        },
    }
    return json.dumps(payload, indent=2)


def _report_table(table, report) -> str:
    g, c = report.global_fit, report.constrained_fit
    labels = table.stratum_labels()
    width = max(8, max(len(lab) for lab in labels))
    out = [
        "Maximum likelihood estimates",
        f"{'':{width}}  {'global':^26}  {'common ratio':^26}",
        f"{'stratum':{width}}  {'pi1':>8} {'gamma':>8} {'delta':>8}  {'pi1':>8} {'gamma':>8} {'delta':>8}",
    ]
    for j, lab in enumerate(labels):
        mark = "*" if j in c.boundary_strata else " "
        out.append(
            f"{lab:{width}}  {g.pi1_tilde[j]:8.4f} {g.gamma_tilde[j]:8.4f} {g.delta_tilde[j]:8.4f}"
            f"  {c.pi1_hat[j]:8.4f} {c.gamma_hat[j]:8.4f} {c.delta_hat:8.4f}{mark}"
        )
    status = "converged" if c.converged else "NOT converged"
    out.append(f"common ratio fit {status} after {c.iterations} iterations")
    if c.boundary_strata:
        out.append("* pi1 on the feasibility boundary")
    out += ["", f"{'test':<8} {'statistic':>10} {'df':>4} {'p-value':>8}"]
    for r in report.results.values():
        out.append(f"{r.method:<8} {r.statistic:10.4f} {r.df:4d} {r.p_value:8.4f}")
    return "\n".join(out)


def cmd_test(args, stdout: IO[str]) -> int:
    table = _load_input(args.file)
    methods = METHODS if args.method == "all" else (METHOD_FLAGS[args.method],)
    report = homogeneity_tests(table, methods)
    text = _report_json(table, report) if args.format == "json" else _report_table(table, report)
    stdout.write(text + "\n")
    return EXIT_OK


def _load_input(name: str) -> StratifiedTable:
    if name == "ome":
        return parse_table(bundled_ome_path().read_text(), "ome")
    if name == "-":
        return parse_table(sys.stdin.read(), "<stdin>")
    try:
        return read_table(name)
    except FileNotFoundError:
        raise ParseError(f"{name}: file not found") from None
    except IsADirectoryError:
        raise ParseError(f"{name}: is a directory") from None


# ------------------------------------------------------------------ #
# simulate command
# ------------------------------------------------------------------ #


def _fmt_row(row: dict) -> list[str]:
    out = []
    for col in SIM_COLUMNS:
        v = row[col]
        out.append(f"{v:.4f}" if isinstance(v, float) else str(v))
    return out


def _parse_bounds(text: str) -> dict:
    bounds = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            key, rng = part.split("=")
            lo, hi = rng.split(":")
            bounds[key.strip()] = (float(lo), float(hi))
        except ValueError:
            raise ParseError(f"--bounds: expected name=lo:hi[,name=lo:hi...], got {part!r}") from None
    return bounds


def _parse_vector(text: str) -> tuple[float, ...]:
    try:
        vec = tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())
    except ValueError:
        raise ParseError(f"--delta-vector: expected comma-separated numbers, got {text!r}") from None
    if not vec:
        raise ParseError("--delta-vector: empty vector")
    return vec


def _sim_configs(args):
    common = dict(replications=args.reps, alpha=args.alpha, seed=args.seed)
    if args.kind == "sweep":
        return sweep_configs(args.configs, args.j[0], args.m[0], _parse_bounds(args.bounds), **common)
    grid = dict(js=args.j, ms=args.m, gamma_cases=args.gamma_case, pi_cases=args.pi_case)
    if args.kind == "size":
        return size_configs(deltas=args.delta, **grid, **common)
    vec = _parse_vector(args.delta_vector) if args.delta_vector else None
    return power_configs(delta_a=args.delta_a, delta0=args.delta0, delta_vector=vec, **grid, **common)


def cmd_simulate(args, stdout: IO[str]) -> int:
    if args.kind == "sweep":
        for flag in ("j", "m"):
            if getattr(args, flag) is not None and len(getattr(args, flag)) != 1:
                raise ParseError(f"simulate sweep takes a single --{flag}")
    elif args.configs is not None or args.bounds is not None:
        raise ParseError("--configs/--bounds apply to simulate sweep only")
    if args.kind != "power" and (args.delta_a is not None or args.delta_vector is not None or args.delta0 is not None):
        raise ParseError("--delta0/--delta-a/--delta-vector apply to simulate power only")
    if args.kind != "size" and args.delta is not None:
        raise ParseError("--delta applies to simulate size only; use --delta0/--delta-a for power")
    _fill_defaults(args)
    configs = _sim_configs(args)
    fh = open(args.out, "w", newline="") if args.out else stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        for cfg in configs:
            for row in simulate(cfg, args.workers).rows():
                w.writerow(_fmt_row(row))
            fh.flush()
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def _fill_defaults(args) -> None:
    sweep = args.kind == "sweep"
    if args.j is None:
        args.j = [2] if sweep else list(SIZE_J)
    if args.m is None:
        args.m = [50] if sweep else list(SIZE_M)
    if args.delta is None:
        args.delta = list(SIZE_DELTAS)
    if args.delta_a is None:
        args.delta_a = list(POWER_DELTA_A)
    if args.delta0 is None:
        args.delta0 = POWER_DELTA0
    if args.gamma_case is None:
        args.gamma_case = list(GAMMA_CASES)
    if args.pi_case is None:
        args.pi_case = list(PI_CASES)
    if args.configs is None:
        args.configs = 1000
    if args.bounds is None:
        args.bounds = ""


# ------------------------------------------------------------------ #
# entry point
# ------------------------------------------------------------------ #


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bilat", description="Homogeneity tests of rate ratios for stratified bilateral data.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="test a count table for a common rate ratio")
    t.add_argument("file", help="count CSV (stratum,group,m0,m1,m2); 'ome' for the bundled example, '-' for stdin")
    t.add_argument("--method", choices=["lrt", "score", "wald", "all"], default="all")
    t.add_argument("--format", choices=["table", "json"], default="table")

    s = sub.add_parser("simulate", help="Monte Carlo size, power or random-configuration sweep")
    s.add_argument("kind", choices=["size", "power", "sweep"])
    s.add_argument("--j", type=_positive_int, nargs="+", help="strata counts (default: 2 4 6 8; sweep: 2)")
    s.add_argument("--m", type=_positive_int, nargs="+", help="patients per group and stratum (default: 25 50 100; sweep: 50)")
    s.add_argument("--delta", type=float, nargs="+", help="common ratio under the null (size; default 1.0 1.2 0.8)")
    s.add_argument("--delta0", type=float, help="ratio in odd strata (power; default 0.5)")
    s.add_argument("--delta-a", type=float, nargs="+", help="ratio in even strata (power; default 1.0 1.2 1.4)")
    s.add_argument("--delta-vector", help="explicit ratios, comma separated, cycled to J (power)")
    s.add_argument("--gamma-case", choices=list(GAMMA_CASES), nargs="+")
    s.add_argument("--pi-case", choices=list(PI_CASES), nargs="+")
    s.add_argument("--configs", type=_positive_int, help="number of random configurations (sweep; default 1000)")
    s.add_argument("--bounds", help="sweep box, e.g. pi1=0.1:0.5,gamma=0.1:0.9,delta=0.5:1.5")
    s.add_argument("--reps", type=_positive_int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--workers", type=_positive_int, help="worker threads (default: BILAT_THREADS or CPU count)")
    s.add_argument("--out", help="write CSV here instead of stdout")
    return p


def main(argv: Sequence[str] | None = None, stdout: IO[str] | None = None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if args.command == "test":
            return cmd_test(args, stdout)
        return cmd_simulate(args, stdout)
    except ParseError as exc:
        print(f"bilat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"bilat: error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE if str(exc).startswith("df = 0") else EXIT_USAGE
    except (DegenerateTableError, SingularInformationError, NoFeasibleSolutionError, ResamplingExhausted) as exc:
        print(f"bilat: error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as exc:
        print(f"bilat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
