"""Dense feed-forward networks over a flat parameter vector.

Parameter layout (frozen; snapshot files depend on it): layers in order, and
for each layer the weight matrix of shape ``(fan_in, fan_out)`` in row-major
order followed by the bias vector of length ``fan_out``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .autodiff import Jet

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MlpModel:
    """Architecture of a dense network; hidden layers use ``activation``, the output layer is linear."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least input and output widths, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def build(cls, n_in, hidden=(50, 50), n_out=1, activation="tanh"):
        return cls((n_in, *hidden, n_out), activation)

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def hidden_widths(self):
        return self.layer_sizes[1:-1]

    @cached_property
    def _offsets(self):
        offs, k = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = (k, k + fan_in * fan_out)
            b = (w[1], w[1] + fan_out)
            offs.append((fan_in, fan_out, w, b))
            k = b[1]
        return tuple(offs), k

    @property
    def n_params(self):
        return self._offsets[1]

    def unpack(self, theta):
        """Split a flat vector (array or tensor) into ``[(W, b), ...]``."""
        if unwrap_shape(theta) != (self.n_params,):
            raise ValueError(f"parameter vector has shape {unwrap_shape(theta)}, expected ({self.n_params},)")
        layers = []
        for fan_in, fan_out, (w0, w1), (b0, b1) in self._offsets[0]:
            layers.append((theta[w0:w1].reshape(fan_in, fan_out), theta[b0:b1]))
        return layers

    def pack(self, layers):
        parts = []
        for (fan_in, fan_out, _, _), (w, b) in zip(self._offsets[0], layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer shapes {w.shape}/{b.shape} do not match ({fan_in}, {fan_out})")
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def xavier_init(self, rng, bias=0.0):
        """Xavier-normal weights, constant biases."""
        layers = []
        for fan_in, fan_out, _, _ in self._offsets[0]:
            std = np.sqrt(2.0 / (fan_in + fan_out))
            layers.append((rng.normal(0.0, std, (fan_in, fan_out)), np.full(fan_out, bias)))
        return self.pack(layers)

    def _check_inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :] if self.n_in > 1 or x.size == 1 else x[:, None]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"input of shape {np.shape(x)} does not match network input width {self.n_in}")
        return x

    def _act(self, z):
        return ad.tanh(z) if self.activation == "tanh" else z

    def forward(self, theta, x, masks=None):
        """Network outputs of shape ``(N, n_out)``.

        ``theta`` may be a plain array or a tape tensor. ``masks`` optionally
        holds one multiplicative array per hidden layer (dropout).
        """
        h = self._check_inputs(x)
        layers = self.unpack(theta)
        for i, (w, b) in enumerate(layers):
            h = ad.matmul(h, w) + b
            if i < len(layers) - 1:
                h = self._act(h)
                if masks is not None:
                    h = h * masks[i]
        return h

    def __call__(self, theta, x, masks=None):
        return self.forward(theta, x, masks)

    def jet(self, theta, inputs, coord=0, masks=None):
        """Outputs with first and second derivatives along input ``coord``."""
        x = self._check_inputs(inputs)
        if not 0 <= coord < self.n_in:
            raise ValueError(f"differentiation coordinate {coord} outside input width {self.n_in}")
        direction = np.zeros_like(x)
        direction[:, coord] = 1.0
        h = Jet(x, direction, np.zeros_like(x))
        layers = self.unpack(theta)
        for i, (w, b) in enumerate(layers):
            h = h.matmul(w) + b
            if i < len(layers) - 1:
                if self.activation == "tanh":
                    h = ad.jet_tanh(h)
                if masks is not None:
                    h = h * masks[i]
        return h


def unwrap_shape(theta):
    return tuple(np.shape(ad.unwrap(theta)))


def forward(model, theta, x, masks=None):
    return model.forward(theta, x, masks)


def input_jet(model, theta, x, extra_inputs=None, coord=0):
    """Value and first/second derivatives of every output along one input coordinate.

    ``x`` holds the values of the differentiated coordinate; ``extra_inputs``
    (shape ``(N, n_in - 1)``) supplies the remaining, fixed coordinates.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if extra_inputs is None:
        if model.n_in != 1:
            raise ValueError(f"network has {model.n_in} inputs; pass extra_inputs for the fixed ones")
        inputs = x[:, None]
    else:
        extra = np.atleast_2d(np.asarray(extra_inputs, dtype=np.float64))
        if extra.shape[0] == 1 and x.size > 1:
            extra = np.repeat(extra, x.size, axis=0)
        inputs = np.insert(extra, coord, x, axis=1)
    return model.jet(theta, inputs, coord)


def grad_params(model, theta, loss):
    """Gradient of ``loss(model, theta_tensor)`` with respect to the flat parameters."""
    return ad.grad(lambda th: loss(model, th), theta)
