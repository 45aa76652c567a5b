"""Turn any method's posterior into a :class:`PredictiveSummary` at query inputs."""

from __future__ import annotations

import numpy as np

from .approx import LaplaceFit, mcd_predict
from .gp import GpModel, gp_predict
from .uq import PredictiveSummary, from_moments, summarize


def member_predictions(target, thetas, x):
    """Per-member predictive means and aleatoric variances (first output), each (M, N)."""
    means, vars_ = [], []
    for theta in np.atleast_2d(thetas):
        m, v = target.predict(theta, x)
        means.append(np.asarray(m)[:, 0])
        vars_.append(np.asarray(v)[:, 0])
    return np.array(means), np.array(vars_)


def predictive_summary(target, ensemble, x, rng=None) -> PredictiveSummary:
    """Predictive mean, aleatoric and epistemic variance of an ensemble snapshot.

    Laplace snapshots use the linearized variance; MC-dropout snapshots draw
    fresh masks (``rng`` required); everything else averages over members.
    """
    method = ensemble.method
    if method == "laplace" and "chol" in ensemble.extras:
        fit = LaplaceFit.from_ensemble(ensemble)
        m, v = target.predict(fit.theta_map, x)
        var_e = fit.predict_var(target.output_jacobian(fit.theta_map, x))
        return from_moments(np.asarray(m)[:, 0], np.asarray(v)[:, 0], var_e, method)
    if method == "mcd":
        if rng is None:
            raise ValueError("MC-dropout prediction needs an rng")
        rate = ensemble.config.get("rate", 0.05)
        m = int(ensemble.config.get("n_samples", 1000))
        means, vars_ = mcd_predict(target, ensemble.thetas[0], rate, x, m, rng)
        return summarize(means, vars_, method)
    means, vars_ = member_predictions(target, ensemble.thetas, x)
    return summarize(means, vars_, method)


def gp_summary(model: GpModel, x) -> PredictiveSummary:
    mean, cov, _ = gp_predict(model, x)
    return from_moments(mean, np.full(mean.size, model.noise_var), np.maximum(np.diag(cov), 0.0), "gp")
