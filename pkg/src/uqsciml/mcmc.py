"""Sampling-based posterior inference: HMC, Langevin dynamics / SGLD, Gibbs hyperparameter updates.

A *target* is any object with ``n_params`` and ``value_and_grad(theta, idx=None)``
returning the (tempered) log-posterior and its gradient. Gibbs updates
additionally need ``sum_sq_residuals``, ``n_data``, ``with_noise`` and
``with_prior_variance`` (see :class:`uqsciml.probmodel.LogPosterior`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NonFiniteLossError
from .ensemble import PosteriorEnsemble

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
LOW_ACCEPTANCE = 0.05


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.1
    n_leapfrog: int = 50
    burn_in: int = 2000
    n_samples: int = 1000
    adapt_fraction: float = 0.8
    target_accept: float = 0.6
    lag: int = 1
    jitter: float = 0.5  # proposal step size drawn uniformly from eps * [1 - jitter, 1 + jitter]
    adapt_gain: float = 0.2  # dual-averaging gamma

    def __post_init__(self):
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must lie in [0, 1)")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_leapfrog < 1 or self.n_samples < 1 or self.burn_in < 0 or self.lag < 1:
            raise ValueError(f"invalid HMC counts: {self}")
        if not 0.0 <= self.adapt_fraction <= 1.0:
            raise ValueError("adapt_fraction must lie in [0, 1]")
        if not self.adapt_gain > 0:
            raise ValueError("adapt_gain must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass(frozen=True)
class GibbsConfig:
    """Inverse-Gamma hyperpriors: (h1, h2) on the prior variance, (h3, h4) on the noise variance."""

    h1: float = 2.0
    h2: float = 0.25
    h3: float = 2.0
    h4: float = 10.0
    update_prior: bool = True
    update_noise: bool = True

    def __post_init__(self):
        if min(self.h1, self.h2, self.h3, self.h4) <= 0:
            raise ValueError("inverse-Gamma hyperparameters must be positive")


@dataclass
class GibbsState:
    sigma_theta2: float
    sigma_u2: float
    h1: float = 2.0
    h2: float = 0.25
    h3: float = 2.0
    h4: float = 10.0

    def __post_init__(self):
        if min(self.sigma_theta2, self.sigma_u2, self.h1, self.h2, self.h3, self.h4) <= 0:
            raise ValueError("Gibbs state entries must all be positive")


# leapfrog ------------------------------------------------------------------

def leapfrog_trajectory(theta, m, eps, n_steps, value_and_grad, start=None):
    """Integrate ``n_steps`` leapfrog steps of H = -log p(theta) + |m|^2 / 2.

    Returns ``(theta, m, logp, grad, diverged)``; ``start`` may carry the
    already-known ``(logp, grad)`` at the initial position.
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    m = np.array(m, dtype=np.float64, copy=True)
    # blown-up trajectories are reported as divergences, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _leapfrog(theta, m, eps, n_steps, value_and_grad, start)


def _leapfrog(theta, m, eps, n_steps, value_and_grad, start):
    try:
        logp, g = start if start is not None else value_and_grad(theta)
        m += 0.5 * eps * g
        for i in range(n_steps):
            theta += eps * m
            logp, g = value_and_grad(theta)
            if not (np.isfinite(logp) and np.all(np.isfinite(g))):
                return theta, m, logp, g, True
            m += (eps if i < n_steps - 1 else 0.5 * eps) * g
    except (NonFiniteLossError, FloatingPointError):
        return theta, m, -np.inf, None, True
    return theta, m, logp, g, False


def leapfrog(theta, m, eps, n_steps, grad_fn):
    """Leapfrog positions and momenta using a gradient-only oracle of log p."""
    theta, m, _, _, diverged = leapfrog_trajectory(
        theta, m, eps, n_steps, lambda th: (0.0, grad_fn(th)))
    if diverged:
        raise FloatingPointError("non-finite gradient during leapfrog integration")
    return theta, m


class DualAveraging:
    """Step-size controller that drives the mean acceptance probability to a target."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        eta = t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar) if self.t else math.exp(self.log_eps)


def hmc_step(theta, eps, n_steps, target, rng, start=None):
    """One HMC proposal with Metropolis correction.

    Returns ``(theta, (logp, grad), accept_prob, accepted, diverged)``.
    """
    if start is None:
        start = target.value_and_grad(theta)
    logp0, _ = start
    m0 = rng.standard_normal(theta.shape)
    th1, m1, logp1, g1, diverged = leapfrog_trajectory(theta, m0, eps, n_steps, target.value_and_grad, start)
    if not diverged:
        h0 = -logp0 + 0.5 * float(m0 @ m0)
        h1 = -logp1 + 0.5 * float(m1 @ m1)
        dh = h1 - h0
        if not np.isfinite(dh) or abs(dh) > DIVERGENCE_THRESHOLD:
            diverged = True
    if diverged:
        return theta, start, 0.0, False, True
    accept_prob = min(1.0, math.exp(-dh)) if dh > 0 else 1.0
    if rng.uniform() < accept_prob:
        return th1, (logp1, g1), accept_prob, True, False
    return theta, start, accept_prob, False, False


def hmc_sample(target, config: HmcConfig, rng, theta0, gibbs: GibbsConfig | None = None,
               callback=None):
    """Run one HMC chain and return the retained samples as a :class:`PosteriorEnsemble`.

    The step size adapts by dual averaging during the first
    ``adapt_fraction * burn_in`` proposals and is frozen afterwards. With
    ``gibbs``, prior and noise variances are redrawn after every proposal.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    if theta.shape != (target.n_params,):
        raise ValueError(f"theta0 has shape {theta.shape}, expected ({target.n_params},)")
    eps = config.step_size
    n_adapt = int(round(config.adapt_fraction * config.burn_in))
    controller = DualAveraging(eps, config.target_accept, gamma=config.adapt_gain) if n_adapt > 0 else None
    total = config.burn_in + config.n_samples * config.lag

    samples, hypers = [], []
    accepted_post = divergences = 0
    accept_probs_post = []
    state = target.value_and_grad(theta)
    for it in range(total):
        eps_it = eps * rng.uniform(1.0 - config.jitter, 1.0 + config.jitter) if config.jitter else eps
        theta, state, a_prob, accepted, diverged = hmc_step(theta, eps_it, config.n_leapfrog, target, rng, state)
        if diverged:
            divergences += 1
            log.debug("HMC divergence at iteration %d (eps=%.3g)", it, eps)
        if controller is not None and it < n_adapt:
            eps = controller.update(a_prob)
            if it == n_adapt - 1:
                eps = controller.final
        if gibbs is not None:
            target = gibbs_sweep(theta, target, gibbs, rng)
            state = target.value_and_grad(theta)
        if it >= config.burn_in:
            accepted_post += accepted
            accept_probs_post.append(a_prob)
            if (it - config.burn_in) % config.lag == 0:
                samples.append(theta.copy())
                if gibbs is not None:
                    hypers.append((target.prior.sigma_theta2, target.likelihood.sigma_u**2))
        if callback is not None:
            callback(it, theta, eps, accepted)

    n_post = total - config.burn_in
    stats = {
        "acceptance_rate": accepted_post / n_post,
        "mean_accept_prob": float(np.mean(accept_probs_post)),
        "final_step_size": eps,
        "divergences": divergences,
    }
    warnings = []
    if stats["acceptance_rate"] < LOW_ACCEPTANCE:
        warnings.append(f"low HMC acceptance rate {stats['acceptance_rate']:.3f}")
        log.warning(warnings[-1])
    extras = {"hyperparameters": np.array(hypers)} if hypers else {}
    cfg = asdict(config)
    if gibbs is not None:
        cfg["gibbs"] = asdict(gibbs)
    return PosteriorEnsemble(np.array(samples), "hmc", cfg, None, stats, warnings, extras)


# Langevin ------------------------------------------------------------------

def langevin_step(theta, eps, grad_fn, rng):
    """Unadjusted Langevin update ``theta + eps/2 * grad log p + N(0, eps)``."""
    noise = rng.normal(0.0, math.sqrt(eps), size=np.shape(theta))
    return theta + 0.5 * eps * grad_fn(theta) + noise


def langevin_sample(target, step_size, burn_in, n_samples, rng, theta0, batch_size=None, lag=1,
                    method=None):
    """LD chain (full batch) or SGLD chain (``batch_size`` < N, likelihood rescaled by N/|S|)."""
    theta = np.array(theta0, dtype=np.float64, copy=True)
    n = getattr(target, "n_data", 0)
    sgld = batch_size is not None and batch_size < n
    samples = []
    for it in range(burn_in + n_samples * lag):
        idx = rng.choice(n, size=batch_size, replace=False) if sgld else None
        theta = langevin_step(theta, step_size, lambda th: target.value_and_grad(th, idx)[1], rng)
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"Langevin chain diverged at iteration {it}")
        if it >= burn_in and (it - burn_in) % lag == 0:
            samples.append(theta.copy())
    cfg = {"step_size": step_size, "burn_in": burn_in, "n_samples": n_samples,
           "batch_size": batch_size, "lag": lag}
    return PosteriorEnsemble(np.array(samples), method or ("sgld" if sgld else "ld"), cfg)


# Gibbs ---------------------------------------------------------------------

def _inverse_gamma_draw(shape, rate, rng, size=None):
    # 1/sigma^2 ~ Gamma(shape, scale=1/rate)
    return 1.0 / rng.gamma(shape, 1.0 / rate, size=size)


def gibbs_update_sigma_theta(theta, h1, h2, rng, size=None):
    """Draw the prior variance from its inverse-Gamma full conditional.

    Shape ``h1 + K/2``, rate ``1/h2 + sum(theta**2)/2``. ``size`` requests
    several independent draws from the same conditional.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    return _inverse_gamma_draw(h1 + 0.5 * theta.size, 1.0 / h2 + 0.5 * float(theta @ theta), rng, size)


def gibbs_update_sigma_u(theta, target, h3, h4, rng, size=None):
    """Draw the noise variance from its inverse-Gamma full conditional.

    Shape ``h3 + N/2``, rate ``1/h4 + (sum of squared residuals)/2``.
    """
    n = target.n_data
    ss = target.sum_sq_residuals(theta) if n else 0.0
    return _inverse_gamma_draw(h3 + 0.5 * n, 1.0 / h4 + 0.5 * ss, rng, size)


def gibbs_sweep(theta, target, gibbs: GibbsConfig, rng):
    if gibbs.update_prior:
        target = target.with_prior_variance(gibbs_update_sigma_theta(theta, gibbs.h1, gibbs.h2, rng))
    if gibbs.update_noise:
        target = target.with_noise(gibbs_update_sigma_u(theta, target, gibbs.h3, gibbs.h4, rng))
    return target


def run_chains(sample_fn, n_chains, seed):
    """Run independent chains on spawned RNG streams and merge them."""
    streams = np.random.SeedSequence(seed).spawn(n_chains)
    ens = [sample_fn(np.random.default_rng(s)) for s in streams]
    merged = PosteriorEnsemble.merge(ens)
    merged.seed = seed
    return merged
