"""Exact Gaussian-process regression with a squared-exponential kernel."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class SquaredExponential:
    lengthscale: float = 0.2
    variance: float = 1.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ValueError("kernel lengthscale and variance must be positive")

    def __call__(self, a, b):
        a, b = _as_inputs(a), _as_inputs(b)
        d2 = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
        return self.variance * np.exp(-0.5 * np.maximum(d2, 0.0) / self.lengthscale**2)


def _as_inputs(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True)
class GpModel:
    kernel: SquaredExponential
    noise_var: float
    x: np.ndarray
    alpha: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0


def gp_fit(x, u, kernel: SquaredExponential, noise_var):
    """Cholesky of ``K + noise_var I`` (with the smallest jitter that works) and ``alpha``."""
    x = _as_inputs(x)
    u = np.asarray(u, dtype=np.float64).ravel()
    if x.shape[0] < 1:
        raise ValueError("GP needs at least one training point")
    if x.shape[0] != u.size:
        raise ValueError(f"{x.shape[0]} inputs but {u.size} targets")
    if noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    k = kernel(x, x) + noise_var * np.eye(x.shape[0])
    for jitter in JITTER_LADDER:
        try:
            chol = linalg.cholesky(k + jitter * np.eye(k.shape[0]), lower=True)
            break
        except linalg.LinAlgError:
            continue
    else:
        raise linalg.LinAlgError(f"GP Cholesky failed even with jitter {JITTER_LADDER[-1]:.0e}")
    if jitter:
        log.warning("GP Cholesky used jitter %.0e", jitter)
    alpha = linalg.cho_solve((chol, True), u)
    return GpModel(kernel, float(noise_var), x, alpha, chol, jitter)


def gp_predict(model: GpModel, x_star):
    """Posterior mean, epistemic covariance and total (noisy) variance at ``x_star``."""
    xs = _as_inputs(x_star)
    ks = model.kernel(model.x, xs)
    mean = ks.T @ model.alpha
    v = linalg.solve_triangular(model.chol, ks, lower=True)
    cov = model.kernel(xs, xs) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    total = np.maximum(np.diag(cov), 0.0) + model.noise_var
    return mean, cov, total


def gp_grid_search(x, u, x_val, u_val, lengthscales, variances, noise_var):
    """Kernel hyperparameters maximizing the mean predictive likelihood on a validation split."""
    best = None
    for ell in lengthscales:
        for s2 in variances:
            kern = SquaredExponential(ell, s2)
            mean, _, total = gp_predict(gp_fit(x, u, kern, noise_var), x_val)
            score = float(np.mean(stats.norm.pdf(np.ravel(u_val), mean, np.sqrt(total))))
            if best is None or score > best[0]:
                best = (score, kern)
    return best[1]
