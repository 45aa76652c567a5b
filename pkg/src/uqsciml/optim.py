"""First-order optimizers and a MAP training loop over flat parameter vectors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteLossError

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    """Plain gradient descent with optional heavy-ball momentum."""

    def __init__(self, n, momentum=0.0):
        self.buf = np.zeros(n)
        self.momentum = momentum

    def step(self, theta, grad, lr):
        self.buf = self.momentum * self.buf + grad
        return theta - lr * self.buf


OPTIMIZERS = {"adam": Adam, "sgd": Sgd}


def make_optimizer(name, n):
    try:
        return OPTIMIZERS[name](n)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    """MAP / loss-minimization settings (learning rate, steps, L2 weight decay, optimizer)."""

    lr: float = 1e-3
    steps: int = 10000
    weight_decay: float = 0.0
    optimizer: str = "adam"
    batch_size: int | None = None
    log_every: int = 0

    def __post_init__(self):
        if not self.lr > 0 or self.steps < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config: {self}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def minimize(loss_and_grad, theta0, config: TrainConfig, rng=None, n_data=None, lr_schedule=None,
             on_step=None):
    """Minimize ``loss_and_grad(theta, idx) -> (loss, grad)``.

    ``idx`` is a minibatch index array when ``config.batch_size`` and ``n_data``
    are set, else None. ``lr_schedule(step)`` overrides the constant rate.
    ``on_step(step, theta, loss)`` may return True to stop early. Raises
    :class:`NonFiniteLossError` with the step index on a NaN/inf loss.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    opt = make_optimizer(config.optimizer, theta.size)
    use_batches = config.batch_size is not None and n_data is not None and config.batch_size < n_data
    if use_batches and rng is None:
        raise ValueError("minibatch training needs an rng")
    loss = math.nan
    for step in range(config.steps):
        idx = rng.choice(n_data, size=config.batch_size, replace=False) if use_batches else None
        try:
            loss, g = loss_and_grad(theta, idx)
        except NonFiniteLossError as err:
            raise NonFiniteLossError(err.value, step) from None
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NonFiniteLossError(loss, step)
        if config.weight_decay:
            loss = loss + 0.5 * config.weight_decay * float(theta @ theta)
            g = g + config.weight_decay * theta
        lr = lr_schedule(step) if lr_schedule is not None else config.lr
        theta = opt.step(theta, g, lr)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.6g", step, loss)
        if on_step is not None and on_step(step, theta, loss):
            break
    return theta, loss


def map_fit(posterior, theta0, config: TrainConfig, rng=None, **kwargs):
    """MAP estimate: minimize the negative log-posterior of a :class:`LogPosterior`."""

    def loss_and_grad(theta, idx):
        v, g = posterior.value_and_grad(theta, idx)
        return -v, -g

    return minimize(loss_and_grad, theta0, config, rng=rng, n_data=posterior.n_data, **kwargs)
