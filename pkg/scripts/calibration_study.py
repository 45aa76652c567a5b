"""Recalibrate a synthetic over-confident predictive stream.

Predictions are N(mu, (k sigma)^2) while the data come from N(mu, sigma^2);
k < 1 makes them over-confident. Each calibrator is fitted on one split and
scored on an independent one.

    python scripts/calibration_study.py --shrink 0.5 --n 2000 --seeds 5
"""

import argparse

import numpy as np

from uqsciml.uq import CALIBRATORS, from_moments, rmsce


def stream(n, rng, shrink):
    mu = rng.uniform(-2, 2, n)
    sigma = rng.uniform(0.2, 1.5, n)
    u = mu + sigma * rng.standard_normal(n)
    s = shrink * sigma
    return from_moments(mu, 0.3 * s**2, 0.7 * s**2), u


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--shrink", type=float, default=0.5)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()

    names = sorted(CALIBRATORS)
    print("seed  before  " + "  ".join(f"{n:>9}" for n in names) + "  scale_s")
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        cal, u_cal = stream(args.n, rng, args.shrink)
        test, u_test = stream(args.n, rng, args.shrink)
        maps = {n: CALIBRATORS[n](cal, u_cal) for n in names}
        after = [rmsce(test, u_test, cmap=maps[n]) for n in names]
        print(f"{seed:>4}  {rmsce(test, u_test):.4f}  " + "  ".join(f"{a:9.4f}" for a in after)
              + f"  {maps['scale'].params['s']:.3f}")


if __name__ == "__main__":
    main()
