"""Likelihoods, priors and tempered log-posteriors for regression networks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .mlp import MlpModel

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class LabeledDataset:
    """Paired inputs ``x`` (N, d_in) and targets ``u`` (N, d_out) with noise metadata."""

    x: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if u.ndim == 1:
            u = u[:, None]
        if x.shape[0] != u.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but u has {u.shape[0]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        return LabeledDataset(self.x[idx], self.u[idx], dict(self.meta))

    def split(self, n_first, rng):
        perm = rng.permutation(len(self))
        return self.subset(perm[:n_first]), self.subset(perm[n_first:])

    def standardized(self):
        """Per-dimension z-scored inputs; the shift and scale land in ``meta``."""
        mu, sd = self.x.mean(axis=0), self.x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        meta = dict(self.meta, x_shift=mu.tolist(), x_scale=sd.tolist())
        return LabeledDataset((self.x - mu) / sd, self.u, meta)

    def _x_columns(self):
        return ["x"] if self.x.shape[1] == 1 else [f"x{i}" for i in range(self.x.shape[1])]

    def to_csv(self, path):
        """Write columns ``x`` (or ``x0, x1, ...``) and ``u``; metadata goes to a JSON sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self._x_columns(), "u"])
            for xi, ui in zip(self.x, self.u[:, 0]):
                w.writerow([*(repr(float(v)) for v in xi), repr(float(ui))])
        if self.meta:
            path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with path.open() as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [[float(v) for v in r] for r in reader]
        if not header or header[-1] != "u" or not (header[:-1] == ["x"] or all(
                h == f"x{i}" for i, h in enumerate(header[:-1]))):
            raise ValueError(f"{path}: expected header x,u or x0,...,u, got {header}")
        arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(arr[:, :-1], arr[:, -1], meta)


@dataclass(frozen=True)
class GaussianLikelihood:
    """Factorized Gaussian noise model.

    Homoscedastic when ``head`` is None (variance ``sigma_u**2``); otherwise
    network output ``head`` passes through softplus to give the per-point variance.
    """

    sigma_u: float = 0.1
    head: int | None = None
    learned: bool = False

    def __post_init__(self):
        if self.head is None and not self.sigma_u > 0:
            raise ValueError(f"sigma_u must be positive, got {self.sigma_u}")

    @property
    def heteroscedastic(self):
        return self.head is not None

    def mean_and_var(self, outputs):
        """Split raw network outputs into predictive mean and noise variance."""
        if self.head is None:
            return outputs, self.sigma_u**2
        mean = outputs[:, 0:self.head]
        var = ad.softplus(outputs[:, self.head:self.head + 1]) + VAR_FLOOR
        return mean, var

    def log_prob(self, outputs, u):
        mean, var = self.mean_and_var(outputs)
        r = u - mean
        if self.head is None:
            n = np.size(u)
            return -0.5 * n * (LOG_2PI + np.log(var)) - 0.5 * ad.tsum(r * r) / var
        v = ad.unwrap(var)
        if not np.all(v > 0):
            raise FloatingPointError(f"non-positive predicted variance (min {v.min()})")
        n_out = np.shape(u)[1]
        return -0.5 * ad.tsum(n_out * (LOG_2PI + ad.log(var)) + ad.tsum(r * r, axis=1).reshape(-1, 1) / var)


@dataclass(frozen=True)
class PriorSpec:
    """iid zero-mean Gaussian prior with variance ``sigma_theta2``.

    ``hierarchical`` marks that ``sigma_theta2`` carries an inverse-Gamma
    hyperprior (shape ``h1``, scale ``h2``) and is resampled by Gibbs steps.
    """

    sigma_theta2: float = 1.0
    hierarchical: bool = False
    h1: float = 2.0
    h2: float = 0.25

    def __post_init__(self):
        if not self.sigma_theta2 > 0:
            raise ValueError(f"prior variance must be positive, got {self.sigma_theta2}")
        if self.h1 <= 0 or self.h2 <= 0:
            raise ValueError("inverse-Gamma hyperparameters must be positive")


def log_prior(theta, prior: PriorSpec):
    k = np.size(ad.unwrap(theta))
    s2 = prior.sigma_theta2
    return -0.5 * k * (LOG_2PI + np.log(s2)) - 0.5 * ad.tsum(theta * theta) / s2


def log_likelihood(theta, dataset: LabeledDataset, model: MlpModel, likelihood: GaussianLikelihood):
    if len(dataset) == 0:
        raise ValueError("log-likelihood of an empty dataset")
    return likelihood.log_prob(model.forward(theta, dataset.x), dataset.u)


@dataclass(frozen=True)
class LogPosterior:
    """Tempered log-posterior ``(log p(D|theta) + log p(theta)) / tau`` for one network."""

    model: MlpModel
    dataset: LabeledDataset
    likelihood: GaussianLikelihood = GaussianLikelihood()
    prior: PriorSpec = PriorSpec()
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    @property
    def n_params(self):
        return self.model.n_params

    @property
    def n_data(self):
        return len(self.dataset)

    def log_likelihood(self, theta, idx=None, masks=None):
        """Data log-likelihood; a minibatch ``idx`` is rescaled by N/|S|."""
        if self.n_data == 0:
            return 0.0 * ad.tsum(theta)
        x, u = self.dataset.x, self.dataset.u
        scale = 1.0
        if idx is not None:
            x, u = x[idx], u[idx]
            scale = self.n_data / len(x)
        return scale * self.likelihood.log_prob(self.model.forward(theta, x, masks), u)

    def log_prior(self, theta):
        return log_prior(theta, self.prior)

    def log_prob(self, theta, idx=None):
        return (self.log_likelihood(theta, idx) + self.log_prior(theta)) / self.tau

    __call__ = log_prob

    def value_and_grad(self, theta, idx=None):
        return ad.value_and_grad(lambda th: self.log_prob(th, idx), theta)

    def grad(self, theta, idx=None):
        return self.value_and_grad(theta, idx)[1]

    def predict(self, theta, x, masks=None):
        """Predictive mean and aleatoric variance of one parameter setting, each (N, d_out)."""
        mean, var = self.likelihood.mean_and_var(self.model.forward(theta, x, masks))
        return np.asarray(mean), np.broadcast_to(np.asarray(var, dtype=np.float64), np.shape(mean)).copy()

    def sum_sq_residuals(self, theta):
        mean, _ = self.predict(theta, self.dataset.x)
        return float(np.sum((self.dataset.u - mean) ** 2))

    def output_jacobian(self, theta, x):
        """Jacobian of the mean output (first output column) w.r.t. theta, shape (N, K)."""
        rows = []
        for xi in np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(-1, self.model.n_in):
            rows.append(ad.grad(lambda th: self.model.forward(th, xi[None, :])[0, 0], theta))
        return np.array(rows).reshape(-1, self.n_params)

    def with_noise(self, sigma_u2):
        return replace(self, likelihood=replace(self.likelihood, sigma_u=float(np.sqrt(sigma_u2))))

    def with_prior_variance(self, sigma_theta2):
        return replace(self, prior=replace(self.prior, sigma_theta2=float(sigma_theta2)))

    def with_dataset(self, dataset):
        return replace(self, dataset=dataset)


def generate_student_t_noise(x, rng, nu=5.0, scale=0.5):
    """Heteroscedastic Student-t noise ``scale * |x| * t_nu``."""
    x = np.asarray(x, dtype=np.float64)
    return scale * np.abs(x) * rng.standard_t(nu, size=x.shape)
