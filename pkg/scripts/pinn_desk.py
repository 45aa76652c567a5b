"""Desk-scale U-PINN run on the mixed steep-boundary problem.

MAP warm start followed by HMC; reports RL2E of u at t = 1 against the
method-of-lines reference, the 95% interval coverage on a 101-point grid and
the lambda-network error. Takes several minutes on one core.

    python scripts/pinn_desk.py --samples 200 --out runs/pinn_desk.csv
"""

import argparse
import time

import numpy as np

from uqsciml.mcmc import HmcConfig, hmc_sample
from uqsciml.optim import TrainConfig, map_fit
from uqsciml.pinn import DataLayout, PdeProblem, PinnPosterior, generate_data, reference_solve
from uqsciml.uq import rl2e, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--map-steps", type=int, default=30000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--out", help="optional CSV of x, reference, mean, sigma_total")
    args = p.parse_args()

    t0 = time.perf_counter()
    problem = PdeProblem()
    solution = reference_solve(problem)
    rng = np.random.default_rng(args.seed)
    target = PinnPosterior(problem, generate_data(problem, DataLayout(), rng, solution))
    theta, loss = map_fit(target, target.model.xavier_init(rng), TrainConfig(lr=1e-3, steps=args.map_steps))
    print(f"MAP: loss {loss:.1f} after {time.perf_counter() - t0:.0f} s")

    ens = hmc_sample(target, HmcConfig(step_size=args.step_size, burn_in=args.burn_in, n_samples=args.samples),
                     np.random.default_rng(args.seed + 1), theta)
    print(f"HMC: {ens.stats} after {time.perf_counter() - t0:.0f} s")

    x = np.linspace(-1, 1, 101)
    pts = np.column_stack([np.ones_like(x), x])
    ref = solution(pts)
    s = summarize(np.array([target.predict(t, pts)[0].ravel() for t in ens.thetas]), target.data.u.sigma**2)
    coverage = np.mean(np.abs(s.mean - ref) <= 1.959964 * s.std)
    lam = np.array([np.ravel(target.lam_at(t, x)) for t in ens.thetas]).mean(axis=0)
    lam_err = np.linalg.norm(lam - problem.lam(x)) / np.linalg.norm(problem.lam(x))
    print(f"RL2E(u) {rl2e(s, ref):.4f}  coverage {coverage:.3f}  RL2E(lambda) {lam_err:.3f}")
    if args.out:
        np.savetxt(args.out, np.column_stack([x, ref, s.mean, s.std]), delimiter=",",
                   header="x,reference,mean,sigma_total", comments="")


if __name__ == "__main__":
    main()
