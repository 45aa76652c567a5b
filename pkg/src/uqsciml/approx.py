"""Optimization-based posteriors: mean-field VI, MC dropout and the Laplace approximation.

The fitting routines take a *target* shaped like
:class:`uqsciml.probmodel.LogPosterior`: ``n_params``, ``n_data``,
``log_likelihood(theta, idx=None, masks=None)`` (tensor-friendly),
``prior.sigma_theta2``, ``tau``, ``predict(theta, x, masks=None)`` and
``output_jacobian(theta, x)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from . import autodiff as ad
from .autodiff import NonFiniteLossError
from .ensemble import PosteriorEnsemble
from .optim import Adam, TrainConfig, map_fit, minimize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
RHO_INIT = -6.0  # sigma starts at softplus(-6) = log(1 + exp(-6))
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def softplus_np(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


# mean-field VI ---------------------------------------------------------------

@dataclass
class MeanFieldPosterior:
    """Factorized Gaussian ``prod_j N(mu_j, softplus(rho_j)^2)``."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.rho = np.asarray(self.rho, dtype=np.float64).ravel()
        if self.mu.shape != self.rho.shape:
            raise ValueError("mu and rho must have the same length")

    @classmethod
    def from_sigma(cls, mu, sigma):
        return cls(mu, inverse_softplus(sigma))

    @property
    def sigma(self):
        return softplus_np(self.rho)

    @property
    def n_params(self):
        return self.mu.size

    def sample(self, m, rng, method="mfvi"):
        draws = self.mu + self.sigma * rng.standard_normal((m, self.n_params))
        return PosteriorEnsemble(draws, method, {"n_samples": m},
                                 extras={"mu": self.mu, "sigma": self.sigma})


def gaussian_kl(mu_q, var_q, var_p):
    """KL(N(mu_q, var_q) || N(0, var_p)) summed over coordinates."""
    mu_q, var_q = np.asarray(mu_q, dtype=np.float64), np.asarray(var_q, dtype=np.float64)
    return float(np.sum(0.5 * np.log(var_p / var_q) + (var_q + mu_q**2) / (2.0 * var_p) - 0.5))


def _elbo_terms(phi, eps, target, idx):
    """Reparametrized one-draw ELBO for the stacked variational vector ``phi = [mu, rho]``.

    The tempered target ``(log lik + log prior) / tau`` enters through its
    expectation under q; the prior part and the entropy are in closed form.
    """
    k = target.n_params
    mu, rho = phi[:k], phi[k:]
    sigma = ad.softplus(rho)
    theta = mu + sigma * eps
    s2p = target.prior.sigma_theta2
    loglik = target.log_likelihood(theta, idx) if target.n_data else 0.0 * ad.tsum(theta)
    e_logprior = -0.5 * k * (LOG_2PI + math.log(s2p)) - ad.tsum(mu * mu + sigma * sigma) / (2.0 * s2p)
    entropy = ad.tsum(ad.log(sigma)) + 0.5 * k * (1.0 + LOG_2PI)
    return (loglik + e_logprior) / target.tau + entropy


def elbo(q: MeanFieldPosterior, target, n_mc, rng):
    """Monte Carlo ELBO; with ``tau = 1`` this is ``E_q[log p(D|theta)] - KL(q || prior)``."""
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    phi = np.concatenate([q.mu, q.rho])
    vals = [_elbo_terms(phi, rng.standard_normal(q.n_params), target, None) for _ in range(n_mc)]
    return float(np.mean([ad.unwrap(v) for v in vals]))


def elbo_value_and_grad(phi, eps, target, idx=None):
    return ad.value_and_grad(lambda p: _elbo_terms(p, eps, target, idx), phi)


@dataclass(frozen=True)
class MfviConfig:
    lr: float = 1e-3
    steps: int = 4450
    batch_size: int | None = 32
    n_samples: int = 1000
    eval_every: int = 50
    patience: int = 10
    n_val_draws: int = 20

    def __post_init__(self):
        if not self.lr > 0 or self.steps < 0 or self.eval_every < 1 or self.patience < 1:
            raise ValueError(f"invalid MFVI config: {self}")


def _validation_nll(q, target, val, n_draws, rng):
    """Gaussian NLL of validation targets under the MC predictive of ``q``."""
    means, vars_ = [], []
    for theta in q.sample(n_draws, rng).thetas:
        m, v = target.predict(theta, val.x)
        means.append(m[:, 0])
        vars_.append(v[:, 0])
    means, vars_ = np.array(means), np.array(vars_)
    mu = means.mean(0)
    var = vars_.mean(0) + means.var(0)
    r = val.u[:, 0] - mu
    return float(np.mean(0.5 * (LOG_2PI + np.log(var)) + 0.5 * r * r / var))


def mfvi_fit(target, config: MfviConfig, rng, theta0=None, validation=None, history=None):
    """Maximize the ELBO with Adam and one reparametrized draw per step.

    With a ``validation`` dataset the predictive NLL is checked every
    ``eval_every`` steps and the best variational parameters are kept once
    ``patience`` checks pass without improvement.
    """
    k = target.n_params
    mu0 = np.asarray(theta0, dtype=np.float64) if theta0 is not None else target.model.xavier_init(rng)
    phi = np.concatenate([mu0, np.full(k, RHO_INIT)])
    opt = Adam(phi.size)
    n = target.n_data
    use_batches = config.batch_size is not None and config.batch_size < n
    best, best_nll, bad_checks = phi.copy(), math.inf, 0
    for step in range(config.steps):
        idx = rng.choice(n, size=config.batch_size, replace=False) if use_batches else None
        try:
            value, g = elbo_value_and_grad(phi, rng.standard_normal(k), target, idx)
        except NonFiniteLossError as err:
            raise NonFiniteLossError(err.value, step) from None
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(value, step)
        phi = opt.step(phi, -g, config.lr)
        if history is not None:
            history.append(value)
        if validation is not None and (step + 1) % config.eval_every == 0:
            nll = _validation_nll(MeanFieldPosterior(phi[:k], phi[k:]), target, validation,
                                  config.n_val_draws, rng)
            if nll < best_nll:
                best, best_nll, bad_checks = phi.copy(), nll, 0
            else:
                bad_checks += 1
                if bad_checks >= config.patience:
                    log.info("MFVI early stop at step %d (best validation NLL %.4g)", step, best_nll)
                    break
    if validation is None:
        best = phi
    return MeanFieldPosterior(best[:k], best[k:])


# MC dropout --------------------------------------------------------------------

def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")


def dropout_masks(model, n_rows, rate, rng):
    """One Bernoulli(1 - rate) keep-mask per hidden layer, per row; no rescaling."""
    _check_rate(rate)
    return [(rng.uniform(size=(n_rows, w)) >= rate).astype(np.float64) for w in model.hidden_widths]


@dataclass(frozen=True)
class McdConfig:
    lr: float = 1e-3
    steps: int = 20000
    rate: float = 0.05
    n_samples: int = 1000
    batch_size: int | None = None

    def __post_init__(self):
        _check_rate(self.rate)


def mcd_fit(target, config: McdConfig, rng, theta0=None):
    """MAP training with a fresh dropout mask on every step."""
    theta = np.asarray(theta0, dtype=np.float64) if theta0 is not None else target.model.xavier_init(rng)
    n = target.n_data

    def loss_and_grad(th, idx):
        rows = n if idx is None else len(idx)
        masks = dropout_masks(target.model, rows, config.rate, rng)
        f = lambda t: -(target.log_likelihood(t, idx, masks) + target.log_prior(t)) / target.tau
        return ad.value_and_grad(f, th)

    train = TrainConfig(lr=config.lr, steps=config.steps, batch_size=config.batch_size)
    theta, _ = minimize(loss_and_grad, theta, train, rng=rng, n_data=n)
    return PosteriorEnsemble(theta[None, :], "mcd", asdict(config))


def mcd_predict(target, theta, rate, x, m, rng):
    """``m`` stochastic forward passes; returns (means, aleatoric variances), each (m, N)."""
    _check_rate(rate)
    x = np.asarray(x, dtype=np.float64)
    n_rows = target.model._check_inputs(x).shape[0]
    means, vars_ = [], []
    for _ in range(m):
        mu, var = target.predict(theta, x, dropout_masks(target.model, n_rows, rate, rng))
        means.append(mu[:, 0])
        vars_.append(var[:, 0])
    return np.array(means), np.array(vars_)


# Laplace ---------------------------------------------------------------------

def cholesky_with_jitter(a, ladder=JITTER_LADDER):
    """Lower Cholesky factor of ``a + jitter * I`` for the first jitter in ``ladder`` that works."""
    a = 0.5 * (a + a.T)
    eye = np.eye(a.shape[0])
    for jitter in ladder:
        try:
            chol = linalg.cholesky(a + jitter * eye, lower=True)
        except linalg.LinAlgError:
            continue
        if jitter:
            log.warning("Cholesky needed jitter %.1e", jitter)
        return chol, jitter
    raise linalg.LinAlgError(f"matrix not positive definite even with jitter {ladder[-1]:.1e}")


@dataclass
class LaplaceFit:
    """Gaussian ``N(theta_map, (A + P)^-1)`` stored through the Cholesky factor of ``A + P``.

    ``ggn`` is the data part A (generalized Gauss-Newton of the negative
    log-likelihood, tempered), ``prior_precision`` the diagonal of P.
    """

    theta_map: np.ndarray
    chol: np.ndarray
    ggn: np.ndarray | None = None
    prior_precision: float | None = None
    jitter: float = 0.0

    @property
    def precision(self):
        return self.chol @ self.chol.T

    @property
    def covariance(self):
        inv_l = linalg.solve_triangular(self.chol, np.eye(self.chol.shape[0]), lower=True)
        return inv_l.T @ inv_l

    def predict_var(self, jac):
        """``diag(J (A + P)^-1 J^T)`` for a Jacobian ``jac`` of shape (N, K)."""
        v = linalg.solve_triangular(self.chol, np.atleast_2d(jac).T, lower=True)
        return np.sum(v * v, axis=0)

    def sample(self, m, rng):
        z = rng.standard_normal((self.theta_map.size, m))
        draws = self.theta_map[:, None] + linalg.solve_triangular(self.chol.T, z, lower=False)
        return PosteriorEnsemble(draws.T, "laplace", {"n_samples": m})

    def to_ensemble(self, config=None):
        return PosteriorEnsemble(self.theta_map[None, :], "laplace", dict(config or {}),
                                 stats={"jitter": self.jitter}, extras={"chol": np.tril(self.chol)})

    @classmethod
    def from_ensemble(cls, ens: PosteriorEnsemble):
        if ens.method != "laplace" or "chol" not in ens.extras:
            raise ValueError("snapshot does not hold a Laplace fit")
        return cls(ens.thetas[0], ens.extras["chol"], jitter=ens.stats.get("jitter", 0.0))

    def save(self, directory):
        return self.to_ensemble().save(Path(directory))


def ggn_matrix(target, theta):
    """Data GGN ``sum_i J_i^T J_i / sigma_u^2`` of the homoscedastic Gaussian likelihood, divided by tau.

    Targets with several observation channels provide their own ``ggn_matrix``.
    """
    if hasattr(target, "ggn_matrix"):
        return target.ggn_matrix(theta)
    if target.likelihood.heteroscedastic:
        raise NotImplementedError("GGN is implemented for the homoscedastic likelihood only")
    k = target.n_params
    if target.n_data == 0:
        return np.zeros((k, k))
    jac = target.output_jacobian(theta, target.dataset.x)
    return jac.T @ jac / (target.likelihood.sigma_u**2 * target.tau)


def laplace_at(target, theta_map):
    a = ggn_matrix(target, theta_map)
    p = 1.0 / (target.prior.sigma_theta2 * target.tau)
    chol, jitter = cholesky_with_jitter(a + p * np.eye(a.shape[0]))
    return LaplaceFit(np.asarray(theta_map, dtype=np.float64).copy(), chol, a, p, jitter)


def laplace_fit(target, map_config: TrainConfig, rng, theta0=None):
    """MAP training followed by the GGN + prior-precision Gaussian around the mode."""
    theta = np.asarray(theta0, dtype=np.float64) if theta0 is not None else target.model.xavier_init(rng)
    theta_map, _ = map_fit(target, theta, map_config, rng=rng)
    return laplace_at(target, theta_map)


def laplace_predict_var(fit: LaplaceFit, target, x):
    """Linearized epistemic variance ``grad_u^T (A + P)^-1 grad_u`` at each x."""
    return fit.predict_var(target.output_jacobian(fit.theta_map, x))


def laplace_log_evidence(target, fit: LaplaceFit):
    """Laplace approximation of ``log p(D)``: log joint at the mode plus the Gaussian volume term."""
    k = fit.theta_map.size
    log_det = 2.0 * np.sum(np.log(np.diag(fit.chol)))
    return float(target.log_prob(fit.theta_map) + 0.5 * k * np.log(2.0 * np.pi) - 0.5 * log_det)


def laplace_grid_search(target, prior_vars, map_config: TrainConfig, rng, theta0=None):
    """Offline type-II maximum likelihood for the prior variance over a grid.

    Each grid value gets its own MAP fit (warm-started from the previous mode)
    and Laplace fit; the value with the largest Laplace evidence wins.
    Returns ``(best_prior_var, best_fit, log_evidences)``.
    """
    theta = np.asarray(theta0, dtype=np.float64) if theta0 is not None else target.model.xavier_init(rng)
    best, evidences = None, []
    for s2 in prior_vars:
        t = target.with_prior_variance(s2)
        theta, _ = map_fit(t, theta, map_config, rng=rng)
        fit = laplace_at(t, theta)
        evidences.append(laplace_log_evidence(t, fit))
        if best is None or evidences[-1] > evidences[best[0]]:
            best = (len(evidences) - 1, s2, fit)
    return best[1], best[2], np.array(evidences)
