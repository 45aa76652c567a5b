import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from uqsciml import autodiff as ad
from uqsciml.mlp import MlpModel
from uqsciml.probmodel import (GaussianLikelihood, LabeledDataset, LogPosterior, PriorSpec,
                               generate_student_t_noise, log_likelihood, log_prior)


def identity_net():
    return MlpModel((1, 1), activation="identity")


# likelihood ----------------------------------------------------------------------

def test_single_point_at_mean_unit_noise():
    model = identity_net()
    theta = np.array([2.0, 0.0])
    data = LabeledDataset([[0.5]], [[1.0]])
    val = log_likelihood(theta, data, model, GaussianLikelihood(1.0))
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_benchmark_noise_scale_zero_residual():
    model = identity_net()
    data = LabeledDataset([[0.5]], [[1.0]])
    val = log_likelihood(np.array([2.0, 0.0]), data, model, GaussianLikelihood(0.05))
    assert val == pytest.approx(math.log(1.0 / (0.05 * math.sqrt(2 * math.pi))), abs=1e-13)


def test_likelihood_matches_per_point_density_sum(rng):
    model = MlpModel((1, 6, 1))
    theta = model.xavier_init(rng)
    x, u = rng.uniform(-1, 1, (10, 1)), rng.normal(size=(10, 1))
    pred = model.forward(theta, x)[:, 0]
    oracle = sum(stats.norm.logpdf(ui, loc=pi, scale=0.3) for ui, pi in zip(u[:, 0], pred))
    val = log_likelihood(theta, LabeledDataset(x, u), model, GaussianLikelihood(0.3))
    assert val == pytest.approx(oracle, abs=1e-12)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        log_likelihood(np.zeros(2), LabeledDataset(np.zeros((0, 1)), np.zeros(0)), identity_net(),
                       GaussianLikelihood())


def test_nonpositive_noise_rejected():
    with pytest.raises(ValueError):
        GaussianLikelihood(0.0)


@given(st.integers(0, 2**31), st.floats(-50, 50))
@settings(max_examples=40, deadline=None)
def test_heteroscedastic_variance_positive(seed, shift):
    model = MlpModel((1, 4, 2))
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=model.n_params) * 5
    theta[-1] += shift  # bias of the variance head
    _, var = GaussianLikelihood(head=1).mean_and_var(model.forward(theta, rng.uniform(-3, 3, (20, 1))))
    assert np.all(np.asarray(var) > 0)


def test_heteroscedastic_likelihood_uses_softplus_head():
    model = MlpModel((1, 2), activation="identity")
    theta = model.pack([(np.array([[1.0, 0.0]]), np.array([0.0, 0.3]))])
    data = LabeledDataset([[0.2]], [[0.5]])
    var = math.log1p(math.exp(0.3)) + 1e-8
    expected = stats.norm.logpdf(0.5, 0.2, math.sqrt(var))
    assert log_likelihood(theta, data, model, GaussianLikelihood(head=1)) == pytest.approx(expected, abs=1e-12)


# prior -----------------------------------------------------------------------

def test_prior_at_origin():
    assert log_prior(np.zeros(2), PriorSpec(1.0)) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_prior_flat_limit(rng):
    a, b = rng.normal(size=5), rng.normal(size=5) * 3
    diffs = [abs(log_prior(a, PriorSpec(s)) - log_prior(b, PriorSpec(s))) for s in (1.0, 1e4, 1e8)]
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-6


def test_prior_matches_naive_sum_k5151(rng):
    theta = rng.normal(size=5151)
    s2 = 0.7
    oracle = sum(-0.5 * math.log(2 * math.pi * s2) - t * t / (2 * s2) for t in theta)
    assert log_prior(theta, PriorSpec(s2)) == pytest.approx(oracle, abs=1e-10)


def test_prior_spec_validation():
    with pytest.raises(ValueError):
        PriorSpec(0.0)
    with pytest.raises(ValueError):
        PriorSpec(1.0, h1=-1.0)


# tempered posterior --------------------------------------------------------------

def _posterior(tau=1.0, seed=0):
    rng = np.random.default_rng(seed)
    model = MlpModel((1, 5, 1))
    x = rng.uniform(-1, 1, (12, 1))
    data = LabeledDataset(x, np.sin(3 * x) + 0.1 * rng.normal(size=x.shape))
    return LogPosterior(model, data, GaussianLikelihood(0.1), PriorSpec(1.0), tau), model.xavier_init(rng)


def test_tau_one_equals_unscaled_sum():
    post, theta = _posterior(1.0)
    assert post.log_prob(theta) == post.log_likelihood(theta) + post.log_prior(theta)


@pytest.mark.parametrize("tau, factor", [(0.5, 2.0), (2.0, 0.5)])
def test_tempering_is_linear(tau, factor):
    base, theta = _posterior(1.0)
    hot, _ = _posterior(tau)
    assert hot.log_prob(theta) == pytest.approx(factor * base.log_prob(theta), rel=1e-15)


@given(st.floats(0.05, 20.0), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_argmax_over_grid_is_tau_invariant(tau, seed):
    base, theta = _posterior(1.0, seed % 7)
    hot, _ = _posterior(tau, seed % 7)
    grid = theta[None, :] + 0.3 * np.random.default_rng(seed).normal(size=(15, theta.size))
    assert np.argmax([base.log_prob(t) for t in grid]) == np.argmax([hot.log_prob(t) for t in grid])


def test_nonpositive_tau_rejected():
    with pytest.raises(ValueError):
        _posterior(0.0)


def test_minibatch_rescaling_with_full_batch_is_identity():
    post, theta = _posterior()
    assert post.log_likelihood(theta, np.arange(post.n_data)) == pytest.approx(post.log_likelihood(theta),
                                                                            rel=1e-15)


def test_minibatch_scaled_by_n_over_batch():
    post, theta = _posterior()
    idx = np.array([1, 4, 7])
    direct = GaussianLikelihood(0.1).log_prob(post.model.forward(theta, post.dataset.x[idx]), post.dataset.u[idx])
    assert post.log_likelihood(theta, idx) == pytest.approx(post.n_data / 3 * direct, rel=1e-14)


def test_mle_objective_is_scaled_mse():
    # -2 sigma^2 log p(D|theta) = SSE + const, so both pick the same slope on a 1-parameter family
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 30)
    u = 0.8 * x + 0.1 * rng.normal(size=30)
    data = LabeledDataset(x, u)
    model = identity_net()
    slopes = np.linspace(0, 2, 401)
    ll = [log_likelihood(np.array([s, 0.0]), data, model, GaussianLikelihood(0.1)) for s in slopes]
    sse = [np.sum((s * x - u) ** 2) for s in slopes]
    assert np.argmax(ll) == np.argmin(sse)
    const = -2 * 0.01 * np.array(ll) - np.array(sse)
    np.testing.assert_allclose(const, const[0], atol=1e-12)


def test_map_gradient_is_mse_plus_l2():
    post, theta = _posterior()
    sigma2, s2p = 0.01, 1.0
    x, u = post.dataset.x, post.dataset.u

    def penalized(th):
        r = post.model.forward(th, x) - u
        return ad.tsum(r * r) / (2 * sigma2) + ad.tsum(th * th) / (2 * s2p)

    np.testing.assert_allclose(-post.grad(theta), ad.grad(penalized, theta), rtol=1e-12, atol=1e-10)


# student-t noise ----------------------------------------------------------------

def test_student_t_zero_at_origin(rng):
    assert np.all(generate_student_t_noise(np.zeros(100), rng) == 0.0)


def test_student_t_variance_at_one():
    draws = generate_student_t_noise(np.ones(1_000_000), np.random.default_rng(7))
    assert np.var(draws) == pytest.approx(0.25 * 5 / 3, rel=0.02)


def test_student_t_mean_zero():
    draws = generate_student_t_noise(np.ones(1_000_000), np.random.default_rng(0))
    assert abs(draws.mean()) < 3 * draws.std() / 1000


def test_student_t_scales_with_abs_x():
    a = generate_student_t_noise(np.full(5, 2.0), np.random.default_rng(1))
    b = generate_student_t_noise(np.full(5, -1.0), np.random.default_rng(1))
    np.testing.assert_allclose(a, 2 * b)


# dataset files -------------------------------------------------------------------

def test_dataset_csv_roundtrip(tmp_path, rng):
    data = LabeledDataset(rng.normal(size=(6, 1)), rng.normal(size=6), {"noise": "gaussian", "sigma": 0.1})
    data.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x,u"
    back = LabeledDataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.u, data.u)
    assert back.meta["sigma"] == 0.1
