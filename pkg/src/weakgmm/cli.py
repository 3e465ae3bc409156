"""Command-line interface: ``weakgmm {simulate,table,verify,prior,gen-specs}``.

Exit codes: 0 on success, 1 when ``verify`` finds a failing check, 2 on
malformed or missing input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import montecarlo as mc
from .functionals import IDENTITY
from .model import DesignError, dump_designs, load_designs
from .quasibayes import flat_prior, invariant_prior

logger = logging.getLogger("weakgmm")


class InputError(Exception):
    pass


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "y", "on"):
        return True
    if v in ("0", "false", "no", "n", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakgmm", description="Weak-identification GMM limit-experiment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte Carlo RMSE per specification")
    s.add_argument("--specs", required=True, help="calibration JSON")
    s.add_argument("--estimators", type=_csv_list, default=list(mc.ESTIMATORS))
    s.add_argument("--functionals", type=_csv_list, default=[IDENTITY])
    s.add_argument("--reps", type=int, default=10_000)
    s.add_argument("--bag-draws", type=int, default=400)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--grid", type=int, default=2001)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)

    t = sub.add_parser("table", help="bin per-spec results into a summary table")
    t.add_argument("--in", dest="inp", required=True, help="CSV written by simulate")
    t.add_argument("--bin", choices=(mc.EFF_F, mc.K_BINS), default=mc.EFF_F)
    t.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run the numerical property checks")
    v.add_argument("--quick", action="store_true", help="smaller sample sizes")
    v.add_argument("--out", help="write the JSON report here instead of stdout")

    pr = sub.add_parser("prior", help="export a prior density as CSV")
    pr.add_argument("--specs", required=True)
    pr.add_argument("--spec-id", help="design id (default: first design)")
    pr.add_argument("--kind", choices=("invariant", "flat"), default="invariant")
    pr.add_argument("--grid", type=int, default=2001)
    pr.add_argument("--out", required=True)

    g = sub.add_parser("gen-specs", help="write synthetic calibration designs")
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--target-f", type=float, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--hetero", type=_bool, default=False)
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--out", required=True)
    return p


def _load(path):
    try:
        return load_designs(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except DesignError as exc:
        raise InputError(str(exc)) from None


def cmd_simulate(args) -> int:
    designs = _load(args.specs)
    try:
        cfg = mc.SimConfig(
            replications=args.reps, bag_draws=args.bag_draws, master_seed=args.seed,
            estimators=tuple(args.estimators), functionals=tuple(args.functionals),
            grid_points=args.grid, workers=args.workers,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    reports = []
    for i, d in enumerate(designs):
        logger.info("spec %s (%d/%d)", d.id, i + 1, len(designs))
        reports.extend(mc.run_spec(d, cfg, i))
    mc.write_reports(reports, args.out)
    return 0


def cmd_table(args) -> int:
    try:
        reports = mc.read_reports(args.inp)
    except FileNotFoundError:
        raise InputError(f"{args.inp}: no such file") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    mc.write_table(mc.aggregate(reports, args.bin), args.out)
    return 0


def cmd_verify(args) -> int:
    from .suite import run_all

    results = run_all(quick=args.quick)
    report = {"passed": all(r.passed for r in results), "checks": [r.to_dict() for r in results]}
    text = json.dumps(report, indent=1, default=float)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for r in results:
        logger.info("%s", r.line())
    return 0 if report["passed"] else 1


def cmd_prior(args) -> int:
    designs = _load(args.specs)
    if args.spec_id is None:
        d = designs[0]
    else:
        match = [d for d in designs if d.id == args.spec_id]
        if not match:
            raise InputError(f"{args.specs}: no design with id {args.spec_id!r}")
        d = match[0]
    if args.grid < 3:
        raise InputError("--grid must be at least 3")
    prior = invariant_prior(d, args.grid) if args.kind == "invariant" else flat_prior(d, args.grid)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("theta", "density"))
        for t, v in zip(prior.grid, prior.density()):
            w.writerow((repr(float(t)), repr(float(v))))
    return 0


def cmd_gen_specs(args) -> int:
    try:
        designs = mc.generate_synthetic_designs(args.k, args.target_f, args.n, args.hetero, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    dump_designs(designs, args.out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "table": cmd_table, "verify": cmd_verify,
    "prior": cmd_prior, "gen-specs": cmd_gen_specs,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"weakgmm: error: {exc}", file=sys.stderr)
        return 2
    except mc.SimulationError as exc:
        print(f"weakgmm: simulation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
