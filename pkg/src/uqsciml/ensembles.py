"""Ensemble posteriors: deep ensembles, snapshot ensembles and SWAG.

Training works on an *objective*: anything with ``n_params``, ``n_data``,
``loss_and_grad(theta, idx)`` and ``init(rng)``. :class:`DataLoss` adapts a
log-posterior target; tests pass small hand-made objectives directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteLossError
from .ensemble import PosteriorEnsemble
from .optim import TrainConfig, minimize

log = logging.getLogger(__name__)

MAX_RESTARTS = 3


@dataclass(frozen=True)
class DataLoss:
    """Mean negative log-likelihood per datum of a log-posterior target (weight decay added by the optimizer)."""

    target: object

    @property
    def n_params(self):
        return self.target.n_params

    @property
    def n_data(self):
        return self.target.n_data

    def init(self, rng):
        return self.target.model.xavier_init(rng)

    def loss_and_grad(self, theta, idx=None):
        n = max(self.n_data, 1)
        v, g = ad.value_and_grad(lambda th: self.target.log_likelihood(th, idx), theta)
        return -v / n, -g / n


def _with_restarts(run, rng, what):
    """Call ``run(rng)``; on a non-finite loss retry with a fresh stream, at most MAX_RESTARTS times."""
    for attempt in range(MAX_RESTARTS + 1):
        try:
            return run(rng), attempt
        except NonFiniteLossError as err:
            if attempt == MAX_RESTARTS:
                raise
            log.warning("%s diverged (%s); restarting with a fresh seed", what, err)
            rng = np.random.default_rng(rng.integers(2**63))


# deep ensembles --------------------------------------------------------------

@dataclass(frozen=True)
class DeepEnsembleConfig:
    n_members: int = 10
    lr: float = 1e-4
    steps: int = 20000
    weight_decay: float = 5e-4
    batch_size: int | None = None

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("a deep ensemble needs at least two members")

    @property
    def train(self):
        return TrainConfig(lr=self.lr, steps=self.steps, weight_decay=self.weight_decay,
                           batch_size=self.batch_size)


def deep_ensemble_fit(objective, config: DeepEnsembleConfig, rng):
    """Independent MAP solutions from independent initializations and RNG streams."""
    members, restarts = [], 0
    for i, stream in enumerate(rng.spawn(config.n_members)):
        def run(r):
            theta, _ = minimize(objective.loss_and_grad, objective.init(r), config.train, rng=r,
                                n_data=objective.n_data)
            return theta
        theta, tries = _with_restarts(run, stream, f"ensemble member {i}")
        members.append(theta)
        restarts += tries
    return PosteriorEnsemble(np.array(members), "dens", asdict(config), stats={"restarts": restarts})


# cyclical schedules ------------------------------------------------------------

@dataclass(frozen=True)
class CyclicalSchedule:
    eps_init: float = 1e-2
    eps_final: float = 1e-4
    steps_total: int = 20000
    t_cycles: int = 20
    t_used: int = 20

    def __post_init__(self):
        if not self.eps_init >= self.eps_final > 0:
            raise ValueError("need eps_init >= eps_final > 0")
        if not 1 <= self.t_used <= self.t_cycles:
            raise ValueError("need 1 <= t_used <= t_cycles")
        if self.steps_total % self.t_cycles:
            raise ValueError("steps_total must be divisible by t_cycles")

    @property
    def cycle_length(self):
        return self.steps_total // self.t_cycles


def cosine_lr(step, schedule: CyclicalSchedule):
    """Half-cosine decay from eps_init to eps_final within each cycle."""
    if not 0 <= step < schedule.steps_total:
        raise ValueError(f"step {step} outside [0, {schedule.steps_total})")
    length = schedule.cycle_length
    k = step % length
    frac = k / (length - 1) if length > 1 else 1.0
    lo, hi = schedule.eps_final, schedule.eps_init
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


def cyclical_trajectory(objective, schedule: CyclicalSchedule, rng, optimizer="adam", theta0=None,
                        batch_size=None):
    """Parameter vectors at the end of every cycle, shape (t_cycles, K)."""
    theta0 = objective.init(rng) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    ends = []

    def on_step(step, theta, _loss):
        if (step + 1) % schedule.cycle_length == 0:
            ends.append(theta.copy())

    cfg = TrainConfig(lr=schedule.eps_init, steps=schedule.steps_total, optimizer=optimizer,
                      batch_size=batch_size)
    minimize(objective.loss_and_grad, theta0, cfg, rng=rng, n_data=objective.n_data,
             lr_schedule=lambda s: cosine_lr(s, schedule), on_step=on_step)
    return np.array(ends)


def snapshot_ensemble_fit(objective, schedule: CyclicalSchedule, rng, optimizer="adam", batch_size=None):
    """The last ``t_used`` cycle-end snapshots of one cyclical trajectory."""
    ends, restarts = _with_restarts(
        lambda r: cyclical_trajectory(objective, schedule, r, optimizer, batch_size=batch_size), rng,
        "snapshot trajectory")
    return PosteriorEnsemble(ends[-schedule.t_used:], "sens", asdict(schedule), stats={"restarts": restarts})


# SWAG ------------------------------------------------------------------------

@dataclass
class SwagFit:
    """Running first and second moments of snapshots plus a bank of deviations (Q x K)."""

    mean: np.ndarray
    second_moment: np.ndarray
    deviations: np.ndarray

    @property
    def rank(self):
        return self.deviations.shape[0]

    @property
    def diag_var(self):
        d = self.second_moment - self.mean**2
        if np.any(d < 0):
            log.debug("clamping %d negative SWAG diagonal variances", int(np.sum(d < 0)))
        return np.maximum(d, 0.0)

    @property
    def covariance(self):
        """``diag/2 + B^T B / (2 (Q - 1))``."""
        low = self.deviations.T @ self.deviations / (self.rank - 1)
        return 0.5 * np.diag(self.diag_var) + 0.5 * low

    @classmethod
    def from_snapshots(cls, snapshots, q=None):
        snaps = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
        q = snaps.shape[0] if q is None else q
        if q < 2:
            raise ValueError("SWAG needs a deviation bank of at least two snapshots")
        if q > snaps.shape[0]:
            raise ValueError(f"Q={q} exceeds the {snaps.shape[0]} available snapshots")
        mean = np.zeros(snaps.shape[1])
        sq = np.zeros(snaps.shape[1])
        for n, s in enumerate(snaps, start=1):
            mean += (s - mean) / n
            sq += (s * s - sq) / n
        return cls(mean, sq, snaps[-q:] - mean)

    def to_ensemble(self, config=None):
        return PosteriorEnsemble(self.mean[None, :], "swag", dict(config or {}),
                                 extras={"swag_diag": self.diag_var, "swag_deviations": self.deviations})

    @classmethod
    def from_ensemble(cls, ens: PosteriorEnsemble):
        mean = ens.thetas[0]
        return cls(mean, ens.extras["swag_diag"] + mean**2, ens.extras["swag_deviations"])

    def save(self, directory):
        return self.to_ensemble().save(Path(directory))


@dataclass(frozen=True)
class SwagConfig:
    schedule: CyclicalSchedule = CyclicalSchedule(t_cycles=10, t_used=5)
    n_samples: int = 50
    rank: int | None = None  # deviation bank size Q; defaults to t_used


def swag_fit(objective, schedule: CyclicalSchedule, rng, q=None, optimizer="adam", batch_size=None):
    """Moments of the last ``t_used`` cycle-end snapshots of a cyclical trajectory."""
    q = schedule.t_used if q is None else q
    if q < 2:
        raise ValueError("SWAG needs Q >= 2")
    ends, _ = _with_restarts(
        lambda r: cyclical_trajectory(objective, schedule, r, optimizer, batch_size=batch_size), rng,
        "SWAG trajectory")
    return SwagFit.from_snapshots(ends[-schedule.t_used:], q)


def swag_sample(fit: SwagFit, m, rng, scale=1.0):
    """Draws ``mean + sqrt(diag/2) z1 + B^T z2 / sqrt(2 (Q - 1))``; ``scale=0`` gives the SWA point."""
    k, q = fit.mean.size, fit.rank
    z1 = rng.standard_normal((m, k))
    z2 = rng.standard_normal((m, q))
    draws = fit.mean + scale * (np.sqrt(0.5 * fit.diag_var) * z1
                                + z2 @ fit.deviations / math.sqrt(2.0 * (q - 1)))
    return PosteriorEnsemble(draws, "swag", {"n_samples": m, "rank": q})
