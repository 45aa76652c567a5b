"""Command line: ``uqsciml {generate,train,evaluate,calibrate,compare}``.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from scipy import linalg

from . import experiment
from .autodiff import NonFiniteLossError
from .experiment import UsageError
from .pinn import SolverError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="uqsciml", description="Uncertainty quantification experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic datasets for a manifest")
    g.add_argument("manifest", help="TOML experiment manifest")
    g.add_argument("--out", help="output directory (default: manifest output_dir)")

    t = sub.add_parser("train", help="generate data and fit the manifest's method")
    t.add_argument("manifest")
    t.add_argument("--out")

    e = sub.add_parser("evaluate", help="metrics, predictions and calibration curve of a trained run")
    e.add_argument("run", help="directory written by train")
    e.add_argument("--gold", help="trained run used as gold standard for NIP-G / KL-G")
    e.add_argument("--out")
    e.add_argument("--levels", type=int, default=99, help="number of calibration levels")

    c = sub.add_parser("calibrate", help="fit a calibration map on the calibration split")
    c.add_argument("run")
    c.add_argument("--method", default="scale", help="scale, isotonic or crude")
    c.add_argument("--out")
    c.add_argument("--levels", type=int, default=99)

    k = sub.add_parser("compare", help="tabulate metrics JSON files into one CSV")
    k.add_argument("metrics", nargs="+")
    k.add_argument("--out", required=True)
    return p


def _run(args):
    if args.command in ("generate", "train"):
        man = experiment.load_manifest(args.manifest)
        out = Path(args.out or man["output_dir"])
        if args.command == "generate":
            experiment.generate(man, out)
        else:
            ens = experiment.train(man, out)
            for w in ens.warnings:
                print(f"warning: {w}", file=sys.stderr)
        print(out)
    elif args.command == "evaluate":
        report = experiment.evaluate(args.run, args.out, args.gold, args.levels)
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.command == "calibrate":
        report = experiment.calibrate(args.run, args.method, args.out, args.levels)
        print(json.dumps({k: report[k] for k in ("calibration", "calib_RMSCE_before", "calib_RMSCE_after")},
                         indent=2))
    else:
        experiment.compare(args.metrics, args.out)
        print(args.out)


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:  # argparse already printed usage
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError, linalg.LinAlgError, SolverError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
