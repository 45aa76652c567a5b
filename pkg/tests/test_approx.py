import math

import numpy as np
import pytest
from scipy import stats

from uqsciml import autodiff as ad
from uqsciml.approx import (LaplaceFit, MeanFieldPosterior, MfviConfig, McdConfig, _elbo_terms,
                            cholesky_with_jitter, dropout_masks, elbo, elbo_value_and_grad, gaussian_kl,
                            ggn_matrix, inverse_softplus, laplace_at, laplace_fit, laplace_grid_search,
                            laplace_log_evidence, laplace_predict_var,
                            mcd_fit, mcd_predict, mfvi_fit, softplus_np)
from uqsciml.ensemble import PosteriorEnsemble
from uqsciml.mlp import MlpModel
from uqsciml.optim import TrainConfig
from uqsciml.probmodel import GaussianLikelihood, LabeledDataset, LogPosterior, PriorSpec

from conftest import central_diff


class Conjugate:
    """u = w x + b with Gaussian prior: the posterior and evidence are closed form."""

    def __init__(self, n=20, sigma_u=0.3, s2p=1.0, centred=True, seed=0):
        rng = np.random.default_rng(seed)
        x = np.linspace(-1, 1, n) if centred else np.linspace(0.2, 1.0, n)
        self.u = 0.7 * x - 0.2 + sigma_u * rng.normal(size=n)
        self.phi = np.column_stack([x, np.ones(n)])
        self.sigma2, self.s2p = sigma_u**2, s2p
        model = MlpModel((1, 1), activation="identity")
        self.target = LogPosterior(model, LabeledDataset(x, self.u), GaussianLikelihood(sigma_u), PriorSpec(s2p))
        self.cov = np.linalg.inv(self.phi.T @ self.phi / self.sigma2 + np.eye(2) / s2p)
        self.mean = self.cov @ self.phi.T @ self.u / self.sigma2

    def log_evidence(self):
        n = len(self.u)
        return stats.multivariate_normal.logpdf(self.u, cov=self.sigma2 * np.eye(n)
                                                + self.s2p * self.phi @ self.phi.T)

    def predictive_var(self, xs):
        f = np.column_stack([xs, np.ones_like(xs)])
        return np.einsum("ij,jk,ik->i", f, self.cov, f)


def empty_target(k_in=1):
    model = MlpModel((k_in, 1), activation="identity")
    return LogPosterior(model, LabeledDataset(np.zeros((0, k_in)), np.zeros(0)), GaussianLikelihood(0.1),
                        PriorSpec(1.0))


# ELBO ------------------------------------------------------------------------

def test_gaussian_kl_closed_form():
    assert gaussian_kl(1.0, 4.0, 1.0) == pytest.approx(math.log(0.5) + 2.5 - 0.5, abs=1e-15)
    assert gaussian_kl(1.0, 4.0, 1.0) == pytest.approx(1.3069, abs=1e-4)
    assert gaussian_kl(np.ones(3), np.full(3, 4.0), 1.0) == pytest.approx(3 * 1.3069, abs=3e-4)


def test_softplus_inverse_roundtrip():
    s = np.array([1e-6, 0.0024726, 0.5, 3.0, 40.0])
    np.testing.assert_allclose(softplus_np(inverse_softplus(s)), s, rtol=1e-12)
    assert softplus_np(-6.0) == pytest.approx(math.log1p(math.exp(-6.0)))


def test_elbo_is_zero_when_q_is_prior_and_no_data():
    q = MeanFieldPosterior.from_sigma(np.zeros(2), np.ones(2))
    assert elbo(q, empty_target(), 3, np.random.default_rng(0)) == pytest.approx(0.0, abs=1e-12)


def test_elbo_without_data_is_minus_kl():
    q = MeanFieldPosterior.from_sigma(np.array([1.0, -0.5]), np.array([2.0, 0.3]))
    expected = -gaussian_kl(q.mu, q.sigma**2, 1.0)
    assert elbo(q, empty_target(), 1, np.random.default_rng(0)) == pytest.approx(expected, abs=1e-12)


def test_elbo_requires_a_draw():
    q = MeanFieldPosterior.from_sigma(np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        elbo(q, empty_target(), 0, np.random.default_rng(0))


def test_elbo_is_loglik_expectation_minus_kl():
    c = Conjugate()
    q = MeanFieldPosterior.from_sigma(np.array([0.5, 0.1]), np.array([0.1, 0.2]))
    eps = np.random.default_rng(0).standard_normal(2)
    theta = q.mu + q.sigma * eps
    expected = c.target.log_likelihood(theta) - gaussian_kl(q.mu, q.sigma**2, 1.0)
    got = ad.unwrap(_elbo_terms(np.concatenate([q.mu, q.rho]), eps, c.target, None))
    assert got == pytest.approx(expected, abs=1e-10)


def test_elbo_below_log_evidence():
    c = Conjugate()
    rng = np.random.default_rng(1)
    exact_q = MeanFieldPosterior.from_sigma(c.mean, np.sqrt(np.diag(c.cov)))
    for q in (exact_q, MeanFieldPosterior.from_sigma(np.zeros(2), np.full(2, 0.5))):
        draws = np.array([ad.unwrap(_elbo_terms(np.concatenate([q.mu, q.rho]), rng.standard_normal(2),
                                                c.target, None)) for _ in range(4000)])
        assert draws.mean() <= c.log_evidence() + 3 * draws.std() / np.sqrt(draws.size)


def test_reparametrization_gradient_matches_finite_differences():
    model = MlpModel((1, 4, 1))
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (8, 1))
    target = LogPosterior(model, LabeledDataset(x, np.sin(2 * x)), GaussianLikelihood(0.2))
    phi = np.concatenate([model.xavier_init(rng), np.full(model.n_params, -1.0)])
    eps = rng.standard_normal(model.n_params)
    _, g = elbo_value_and_grad(phi, eps, target)
    fd = central_diff(lambda p: float(ad.unwrap(_elbo_terms(p, eps, target, None))), phi, 1e-5)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)


# MFVI ------------------------------------------------------------------------

def test_mfvi_recovers_conjugate_posterior():
    c = Conjugate()
    q = mfvi_fit(c.target, MfviConfig(lr=1e-3, steps=20000), np.random.default_rng(0), theta0=np.zeros(2))
    np.testing.assert_allclose(q.mu, c.mean, rtol=0.05)
    np.testing.assert_allclose(q.sigma, np.sqrt(np.diag(c.cov)), rtol=0.05)


def test_mfvi_initial_spread():
    c = Conjugate()
    q = mfvi_fit(c.target, MfviConfig(steps=0), np.random.default_rng(0))
    np.testing.assert_allclose(q.sigma, math.log1p(math.exp(-6.0)))


def test_mfvi_elbo_increases_on_average():
    model = MlpModel((1, 10, 1))
    data = LabeledDataset([[0.3]], [[0.5]])
    target = LogPosterior(model, data, GaussianLikelihood(0.01))
    early, late = [], []
    for seed in range(10):
        hist = []
        mfvi_fit(target, MfviConfig(lr=1e-3, steps=400), np.random.default_rng(seed), history=hist)
        early.append(np.mean(hist[:50]))
        late.append(np.mean(hist[-50:]))
    assert np.mean(late) > np.mean(early)


def test_mfvi_early_stopping_keeps_best_checkpoint():
    c = Conjugate()
    val = LabeledDataset(c.target.dataset.x, c.target.dataset.u)
    cfg = MfviConfig(lr=5e-2, steps=5000, eval_every=10, patience=3)
    q = mfvi_fit(c.target, cfg, np.random.default_rng(0), theta0=np.zeros(2), validation=val)
    assert q.n_params == 2 and np.all(np.isfinite(q.mu))


def test_mfvi_sampling_gives_ensemble():
    q = MeanFieldPosterior.from_sigma(np.array([1.0, 2.0]), np.array([0.1, 0.2]))
    ens = q.sample(50_000, np.random.default_rng(0))
    assert ens.method == "mfvi" and ens.thetas.shape == (50_000, 2)
    np.testing.assert_allclose(ens.thetas.std(0), [0.1, 0.2], rtol=0.02)


def test_mfvi_divergence_reports_step():
    c = Conjugate()
    with pytest.raises(ad.NonFiniteLossError, match="step"):
        mfvi_fit(c.target, MfviConfig(lr=1e6, steps=200), np.random.default_rng(0))


# MC dropout ----------------------------------------------------------------------

def linear_unit(theta_val=1.5):
    model = MlpModel((1, 1, 1), activation="identity")
    theta = model.pack([(np.array([[theta_val]]), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))])
    return LogPosterior(model, LabeledDataset([[0.0]], [[0.0]])), theta


def test_mcd_rate_zero_is_deterministic():
    target, theta = linear_unit()
    means, _ = mcd_predict(target, theta, 0.0, np.array([[0.4], [0.9]]), 20, np.random.default_rng(0))
    assert np.all(means == means[0])
    assert np.all(means.var(0) < 1e-28)  # zero up to the rounding of the sample mean


def test_mcd_half_rate_expectation():
    target, theta = linear_unit(1.5)
    x = 0.8
    means, _ = mcd_predict(target, theta, 0.5, np.array([[x]]), 100_000, np.random.default_rng(1))
    assert means.mean() == pytest.approx(0.5 * 1.5 * x, rel=0.01)


def test_mcd_variance_nondecreasing_in_rate():
    # keep-mask Bernoulli(1 - r) on a linear unit: variance (theta x)^2 r (1 - r), increasing up to r = 1/2
    target, theta = linear_unit(1.5)
    rates = [0.0, 0.1, 0.3, 0.5]
    var = [mcd_predict(target, theta, r, np.array([[0.8]]), 20_000, np.random.default_rng(2))[0].var()
           for r in rates]
    assert all(b >= a - 1e-3 for a, b in zip(var, var[1:]))
    assert var[-1] == pytest.approx((1.2**2) * 0.25, rel=0.03)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_mcd_rejects_bad_rate(rate):
    target, theta = linear_unit()
    with pytest.raises(ValueError):
        mcd_predict(target, theta, rate, np.array([[0.1]]), 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        McdConfig(rate=rate)


def test_dropout_masks_hidden_layers_only():
    model = MlpModel((1, 7, 5, 1))
    masks = dropout_masks(model, 3, 0.5, np.random.default_rng(0))
    assert [m.shape for m in masks] == [(3, 7), (3, 5)]
    assert set(np.unique(np.concatenate([m.ravel() for m in masks]))) <= {0.0, 1.0}


def test_mcd_fit_returns_single_parameter_vector():
    c = Conjugate()
    model = MlpModel((1, 8, 1))
    target = c.target.with_dataset(c.target.dataset)
    target = LogPosterior(model, target.dataset, target.likelihood)
    ens = mcd_fit(target, McdConfig(steps=50), np.random.default_rng(0))
    assert ens.method == "mcd" and ens.thetas.shape == (1, model.n_params)


# Laplace ---------------------------------------------------------------------

def test_laplace_matches_conjugate_posterior():
    c = Conjugate(centred=False)
    fit = laplace_at(c.target, c.mean)
    np.testing.assert_allclose(fit.covariance, c.cov, rtol=0, atol=1e-8)
    xs = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(laplace_predict_var(fit, c.target, xs[:, None]), c.predictive_var(xs),
                               rtol=0, atol=1e-8)


def test_laplace_fit_finds_the_mode():
    c = Conjugate(centred=False)
    fit = laplace_fit(c.target, TrainConfig(lr=1e-2, steps=30000), np.random.default_rng(0))
    np.testing.assert_allclose(fit.theta_map, c.mean, atol=1e-6)
    np.testing.assert_allclose(fit.covariance, c.cov, atol=1e-8)


def test_laplace_evidence_is_exact_for_linear_gaussian():
    for s2p in (0.1, 1.0, 10.0):
        c = Conjugate(centred=False, s2p=s2p)
        assert laplace_log_evidence(c.target, laplace_at(c.target, c.mean)) == pytest.approx(
            c.log_evidence(), abs=1e-8)


def test_laplace_grid_search_maximizes_evidence():
    grid = [0.01, 0.1, 1.0, 10.0, 100.0]
    closed = [Conjugate(centred=False, s2p=s).log_evidence() for s in grid]
    c = Conjugate(centred=False)
    best, fit, ev = laplace_grid_search(c.target, grid, TrainConfig(lr=1e-2, steps=20000),
                                        np.random.default_rng(0))
    np.testing.assert_allclose(ev, closed, atol=1e-4)  # limited by MAP convergence, not the formula
    assert best == grid[int(np.argmax(closed))]
    np.testing.assert_allclose(fit.covariance, Conjugate(centred=False, s2p=best).cov, atol=1e-8)


def test_laplace_without_data_returns_prior():
    fit = laplace_at(empty_target(3), np.zeros(4))
    np.testing.assert_allclose(fit.covariance, np.eye(4), atol=1e-14)


def test_ggn_equals_hessian_for_linear_model():
    c = Conjugate(centred=False)
    theta = np.array([0.3, -0.1])
    hess = np.column_stack([
        (-c.target.grad(theta + h) + c.target.grad(theta - h)) / 2e-4 for h in 1e-4 * np.eye(2)])
    prior_hess = np.eye(2) / c.s2p
    np.testing.assert_allclose(ggn_matrix(c.target, theta), hess - prior_hess, atol=1e-4)


def test_predict_var_zero_for_zero_gradient():
    fit = laplace_at(Conjugate().target, np.zeros(2))
    assert fit.predict_var(np.zeros((1, 2)))[0] == 0.0


def test_linearized_variance_grows_away_from_data():
    c = Conjugate()
    fit = laplace_at(c.target, c.mean)
    var = laplace_predict_var(fit, c.target, np.linspace(1.0, 4.0, 10)[:, None])
    assert np.all(np.diff(var) > 0)


def test_prior_as_penalty_gives_same_predictive_variance():
    c = Conjugate()
    fit = laplace_at(c.target, c.mean)
    flat = c.target.with_prior_variance(1e300)
    penalty_hess = central_diff(lambda t: float(ad.grad(lambda th: ad.tsum(th * th) / (2 * c.s2p), t)[0]),
                                c.mean, 1e-4)
    h2 = np.column_stack([central_diff(lambda t, i=i: float(ad.grad(
        lambda th: ad.tsum(th * th) / (2 * c.s2p), t)[i]), c.mean, 1e-4) for i in range(2)])
    assert penalty_hess[0] == pytest.approx(1.0 / c.s2p)
    chol, _ = cholesky_with_jitter(ggn_matrix(flat, c.mean) + h2)
    alt = LaplaceFit(c.mean, chol)
    jac = c.target.output_jacobian(c.mean, np.linspace(-2, 2, 9)[:, None])
    np.testing.assert_allclose(alt.predict_var(jac), fit.predict_var(jac), rtol=1e-9)


def test_cholesky_jitter_ladder():
    singular = np.array([[1.0, 1.0], [1.0, 1.0]])
    chol, jitter = cholesky_with_jitter(singular)
    assert jitter > 0
    np.testing.assert_allclose(chol @ chol.T, singular + jitter * np.eye(2), atol=1e-12)
    with pytest.raises(np.linalg.LinAlgError, match="1.0e-06"):
        cholesky_with_jitter(-np.eye(2))


def test_laplace_snapshot_roundtrip(tmp_path):
    c = Conjugate()
    fit = laplace_at(c.target, c.mean)
    fit.save(tmp_path / "snap")
    back = LaplaceFit.from_ensemble(PosteriorEnsemble.load(tmp_path / "snap"))
    np.testing.assert_array_equal(back.chol, np.tril(fit.chol))
    np.testing.assert_array_equal(back.theta_map, fit.theta_map)


def test_laplace_samples_have_laplace_covariance():
    c = Conjugate()
    fit = laplace_at(c.target, c.mean)
    ens = fit.sample(200_000, np.random.default_rng(0))
    np.testing.assert_allclose(np.cov(ens.thetas.T), c.cov, rtol=0.02, atol=1e-4)
