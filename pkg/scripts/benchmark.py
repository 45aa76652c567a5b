"""Train, evaluate and calibrate several methods on the 1-D function benchmark.

    python scripts/benchmark.py --methods dens swag gp --seeds 0 1 --out runs/bench

Each (method, seed) pair gets its own manifest; the GP run of the same seed
serves as gold standard. Writes ``summary.csv`` with one row per run.
"""

import argparse
from pathlib import Path

from uqsciml import experiment


def run_one(method, seed, out, overrides):
    man = experiment.resolve_manifest({"seed": seed, "method": {"id": method, **overrides.get(method, {})}})
    run_dir = out / f"{method}-{seed}"
    experiment.train(man, run_dir)
    return run_dir


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--methods", nargs="+", default=["laplace", "dens", "sens", "swag"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--calibration", default="scale", choices=["scale", "isotonic", "crude"])
    p.add_argument("--quick", action="store_true", help="shrink training budgets for a smoke run")
    p.add_argument("--out", default="runs/bench")
    args = p.parse_args()

    out = Path(args.out)
    quick = {"dens": {"n_members": 3, "steps": 2000, "lr": 1e-3},
             "sens": {"steps_total": 2000}, "swag": {"steps_total": 2000},
             "laplace": {"steps": 2000}, "mfvi": {"steps": 2000}, "mcd": {"steps": 2000},
             "hmc": {"burn_in": 200, "n_samples": 100, "n_leapfrog": 20},
             "ld": {"burn_in": 500, "n_samples": 200}} if args.quick else {}
    metric_files = []
    for seed in args.seeds:
        gold = run_one("gp", seed, out, {})
        for method in args.methods:
            run_dir = gold if method == "gp" else run_one(method, seed, out, quick)
            experiment.evaluate(run_dir, gold_dir=gold)
            experiment.calibrate(run_dir, args.calibration)
            metric_files.append(run_dir / "metrics.json")
            print(f"{method} seed {seed}: done")
    experiment.compare(metric_files, out / "summary.csv")
    print((out / "summary.csv").read_text())


if __name__ == "__main__":
    main()
