"""Physics-informed likelihoods for the 1-D nonlinear diffusion-reaction problem

    u_t = D u_xx - lambda(x) u^3 + f(x),   t in [0, 1], x in [-1, 1],

with Dirichlet boundaries ``u(+-1, t) = bc_value`` and initial state
``u(x, 0)``. The solution is a network ``u(t, x)``; the reaction rate is either
a known closed form or a second network ``lambda(x)``. Data arrive in four
channels: the source f (compared with the PDE residual), boundary/initial
values b, solution values u, and reaction-rate values lambda.

A u-network with two outputs is the heteroscedastic variant: the second
output, through softplus, is the noise variance of the u channel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate, interpolate, sparse

from . import autodiff as ad
from .autodiff import Jet
from .mlp import MlpModel
from .probmodel import LOG_2PI, VAR_FLOOR, PriorSpec, log_prior

CHANNELS = ("f", "b", "u", "lambda")


# reference fields ------------------------------------------------------------

def steep_lambda(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.2 + np.exp(x**2) * np.cos(3.0 * x) ** 2


def steep_source(x, length=0.4):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-((x - 0.25) ** 2) / (2.0 * length**2)) * np.sin(3.0 * x) ** 2


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def _cos2(x):
    return np.cos(np.pi * np.asarray(x, dtype=np.float64)) ** 2


def _one(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


LAMBDA_FIELDS = {"steep": steep_lambda, "zero": _zero}
SOURCE_FIELDS = {"steep": steep_source, "zero": _zero}
INITIAL_FIELDS = {"cos2": _cos2, "one": _one}


@dataclass(frozen=True)
class PdeProblem:
    """Problem definition.

    ``lambda_role`` is ``"network"`` (inferred from data, the mixed problem)
    or ``"known"`` (the closed form ``lambda_id`` enters the residual).
    ``lambda_id``, ``source_id`` and ``initial_id`` name the closed forms used
    for the reference solution and the synthetic data.
    """

    diffusion: float = 0.01
    lambda_role: str = "network"
    lambda_id: str = "steep"
    source_id: str = "steep"
    initial_id: str = "cos2"
    bc_value: float = 1.0

    def __post_init__(self):
        if not self.diffusion > 0:
            raise ValueError("diffusion coefficient must be positive")
        if self.lambda_role not in ("network", "known"):
            raise ValueError(f"lambda_role must be 'network' or 'known', got {self.lambda_role!r}")
        for name, table in (("lambda_id", LAMBDA_FIELDS), ("source_id", SOURCE_FIELDS),
                            ("initial_id", INITIAL_FIELDS)):
            if getattr(self, name) not in table:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}; choose from {sorted(table)}")

    def lam(self, x):
        return LAMBDA_FIELDS[self.lambda_id](x)

    def source(self, x):
        return SOURCE_FIELDS[self.source_id](x)

    def initial(self, x):
        return INITIAL_FIELDS[self.initial_id](x)


# residual --------------------------------------------------------------------

@dataclass(frozen=True)
class NetField:
    """A network ``u(t, x)`` evaluated through input jets."""

    model: MlpModel
    theta: object

    def jet(self, points, coord):
        j = self.model.jet(self.theta, points, coord)
        return j if self.model.n_out == 1 else j.map(lambda v: v[:, 0:1])


@dataclass(frozen=True)
class ClosedFormField:
    """A field ``fn(t, x)`` written with jet arithmetic (``ad.jet_sin`` etc.)."""

    fn: object

    def jet(self, points, coord):
        pts = np.asarray(points, dtype=np.float64)
        t, x = pts[:, 0:1], pts[:, 1:2]
        tj = Jet(t, np.full_like(t, coord == 0, dtype=np.float64), np.zeros_like(t))
        xj = Jet(x, np.full_like(x, coord == 1, dtype=np.float64), np.zeros_like(x))
        out = self.fn(tj, xj)
        if not isinstance(out, Jet):
            out = Jet.constant(np.broadcast_to(np.asarray(out, dtype=np.float64), t.shape))
        return out


def residual(field, lam, points, diffusion):
    """``u_t - D u_xx + lambda u^3`` at ``points`` (N, 2) = (t, x); returns (N, 1).

    ``lam`` holds lambda at the points, shape (N, 1) (array or tensor).
    """
    jt = field.jet(points, 0)
    jx = field.jet(points, 1)
    u = jt.value
    return jt.d1 - diffusion * jx.d2 + lam * (u * u * u)


# data ------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    """Observations ``y`` at ``inputs`` with Gaussian likelihood scale ``sigma``."""

    inputs: np.ndarray
    y: np.ndarray
    sigma: float = 0.05

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1, 1)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if inputs.shape[0] != y.shape[0]:
            raise ValueError(f"{inputs.shape[0]} inputs but {y.shape[0]} observations")
        if y.shape[0] and not self.sigma > 0:
            raise ValueError("channel noise scale must be positive")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @classmethod
    def empty(cls, width, sigma=0.05):
        return cls(np.zeros((0, width)), np.zeros(0), sigma)


@dataclass(frozen=True)
class PinnDataset:
    """Four channels; f, b and u take (t, x) inputs, lambda takes x."""

    f: Channel = field(default_factory=lambda: Channel.empty(2))
    b: Channel = field(default_factory=lambda: Channel.empty(2))
    u: Channel = field(default_factory=lambda: Channel.empty(2))
    lam: Channel = field(default_factory=lambda: Channel.empty(1))

    def channels(self):
        return {"f": self.f, "b": self.b, "u": self.u, "lambda": self.lam}

    def __len__(self):
        return sum(len(c) for c in self.channels().values())

    def save(self, path):
        """One CSV with columns ``x,t,value,channel`` (t empty for lambda) plus a JSON sidecar of noise scales."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "t", "value", "channel"])
            for name, ch in self.channels().items():
                for inp, y in zip(ch.inputs, ch.y[:, 0]):
                    t = "" if ch.inputs.shape[1] == 1 else repr(float(inp[0]))
                    w.writerow([repr(float(inp[-1])), t, repr(float(y)), name])
        meta = {name: {"sigma": ch.sigma, "n": len(ch)} for name, ch in self.channels().items()}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        rows = {name: ([], []) for name in CHANNELS}
        with path.open() as fh:
            for r in csv.DictReader(fh):
                if r["channel"] not in rows:
                    raise ValueError(f"{path}: unknown channel {r['channel']!r}")
                inp = [float(r["x"])] if r["channel"] == "lambda" else [float(r["t"]), float(r["x"])]
                rows[r["channel"]][0].append(inp)
                rows[r["channel"]][1].append(float(r["value"]))
        chans = {}
        for name, (inputs, ys) in rows.items():
            width = 1 if name == "lambda" else 2
            chans[name] = Channel(np.array(inputs, dtype=np.float64).reshape(-1, width), np.array(ys),
                                  meta[name]["sigma"])
        return cls(chans["f"], chans["b"], chans["u"], chans["lambda"])


@dataclass(frozen=True)
class DataLayout:
    """Measurement locations for the synthetic steep-boundary benchmark.

    The 13 source measurements cluster near both boundaries; each one is
    collocated with the residual at every time in ``f_times``. Boundary values sit on x = +-1 at
    ``n_boundary_times`` times and the initial state at ``n_initial`` points.
    """

    f_x: tuple = (-0.98, -0.95, -0.9, -0.83, -0.72, -0.45, 0.0, 0.45, 0.72, 0.83, 0.9, 0.95, 0.98)
    f_times: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    n_boundary_times: int = 11
    n_initial: int = 21
    u_x: tuple = (-0.97, -0.92, -0.85, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.85, 0.92, 0.97)
    u_times: tuple = (0.25, 0.5, 0.75, 1.0)
    lambda_x: tuple = tuple(np.round(np.linspace(-1.0, 1.0, 11), 12))
    sigma_f: float = 0.05
    sigma_u: float = 0.05
    sigma_lambda: float = 0.05
    sigma_b: float = 0.01  # likelihood scale; boundary data are clean unless noise_b > 0
    noise_b: float = 0.0

    @property
    def n_f_locations(self):
        return len(self.f_x)


def _grid(times, xs):
    tt, xx = np.meshgrid(np.asarray(times, dtype=np.float64), np.asarray(xs, dtype=np.float64), indexing="ij")
    return np.column_stack([tt.ravel(), xx.ravel()])


def generate_data(problem: PdeProblem, layout: DataLayout, rng, solution=None):
    """Noisy channels sampled from the closed forms and the reference solution."""
    if solution is None:
        solution = reference_solve(problem)
    # one noisy measurement per source location, collocated at every f time
    pf = _grid(layout.f_times, layout.f_x)
    f_noise = layout.sigma_f * rng.standard_normal(len(layout.f_x))
    f_y = problem.source(pf[:, 1]) + np.tile(f_noise, len(layout.f_times))
    bt = np.linspace(0.0, 1.0, layout.n_boundary_times)
    pb = np.vstack([_grid(bt, [-1.0, 1.0]),
                    np.column_stack([np.zeros(layout.n_initial), np.linspace(-1, 1, layout.n_initial)])])
    b_true = np.where(pb[:, 0] == 0.0, problem.initial(pb[:, 1]), problem.bc_value)
    b_y = b_true + layout.noise_b * rng.standard_normal(len(pb))
    pu = _grid(layout.u_times, layout.u_x)
    u_y = solution(pu) + layout.sigma_u * rng.standard_normal(len(pu))
    lx = np.asarray(layout.lambda_x, dtype=np.float64)
    l_y = problem.lam(lx) + layout.sigma_lambda * rng.standard_normal(len(lx))
    return PinnDataset(Channel(pf, f_y, layout.sigma_f), Channel(pb, b_y, layout.sigma_b),
                       Channel(pu, u_y, layout.sigma_u), Channel(lx, l_y, layout.sigma_lambda))


# posterior target ------------------------------------------------------------

@dataclass(frozen=True)
class PinnModel:
    """The u-network ``(t, x) -> u`` and, for the mixed problem, the lambda-network ``x -> lambda``.

    Give the u-network a second output for a per-point u-channel noise variance.
    """

    u_net: MlpModel = MlpModel((2, 50, 50, 1))
    lam_net: MlpModel | None = MlpModel((1, 50, 50, 1))

    @property
    def n_params(self):
        return self.u_net.n_params + (self.lam_net.n_params if self.lam_net else 0)

    @property
    def n_in(self):
        return 2

    @property
    def heteroscedastic(self):
        return self.u_net.n_out == 2

    @property
    def hidden_widths(self):
        return self.u_net.hidden_widths

    def split(self, theta):
        k = self.u_net.n_params
        return theta[:k], (theta[k:] if self.lam_net else None)

    def xavier_init(self, rng, bias=0.0):
        parts = [self.u_net.xavier_init(rng, bias)]
        if self.lam_net:
            parts.append(self.lam_net.xavier_init(rng, bias))
        return np.concatenate(parts)

    def _check_inputs(self, x):
        return self.u_net._check_inputs(x)

    def forward(self, theta, x, masks=None):
        return self.u_net.forward(self.split(theta)[0], x, masks)


@dataclass(frozen=True)
class PinnPosterior:
    """Tempered log-posterior over the stacked parameters of both networks."""

    problem: PdeProblem
    data: PinnDataset
    model: PinnModel = PinnModel()
    prior: PriorSpec = PriorSpec()
    tau: float = 1.0

    def __post_init__(self):
        if (self.problem.lambda_role == "network") != (self.model.lam_net is not None):
            raise ValueError("a lambda network is required exactly when lambda_role == 'network'")
        if self.model.u_net.n_out not in (1, 2):
            raise ValueError("the u-network needs one output, or two with a variance head")

    @property
    def n_params(self):
        return self.model.n_params

    @property
    def n_data(self):
        return len(self.data)

    # channel predictions
    def lam_at(self, theta, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        if self.model.lam_net is None:
            return self.problem.lam(x)
        return self.model.lam_net.forward(self.model.split(theta)[1], x)

    def source_at(self, theta, points):
        th_u, _ = self.model.split(theta)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return residual(NetField(self.model.u_net, th_u), self.lam_at(theta, points[:, 1]), points,
                        self.problem.diffusion)

    def u_outputs(self, theta, points, masks=None):
        return self.model.u_net.forward(self.model.split(theta)[0], np.asarray(points).reshape(-1, 2), masks)

    def u_at(self, theta, points):
        out = self.u_outputs(theta, points)
        return out if self.model.u_net.n_out == 1 else out[:, 0:1]

    def u_noise_var(self, outputs):
        """u-channel noise variance: the softplus head, or the fixed channel scale squared."""
        if self.model.heteroscedastic:
            return ad.softplus(outputs[:, 1:2]) + VAR_FLOOR
        return self.data.u.sigma**2

    def channel_predictions(self, theta):
        """Model output for every non-empty channel, keyed by channel name."""
        out = {}
        d = self.data
        if len(d.f):
            out["f"] = self.source_at(theta, d.f.inputs)
        if len(d.b):
            out["b"] = self.u_at(theta, d.b.inputs)
        if len(d.u):
            out["u"] = self.u_outputs(theta, d.u.inputs)
        if len(d.lam):
            out["lambda"] = self.lam_at(theta, d.lam.inputs)
        return out

    def log_likelihood(self, theta, idx=None, masks=None):
        if idx is not None or masks is not None:
            raise NotImplementedError("PINN likelihood is evaluated on the full dataset without masks")
        return pinn_log_likelihood(self, theta)

    def log_prior(self, theta):
        return log_prior(theta, self.prior)

    def log_prob(self, theta, idx=None):
        return (self.log_likelihood(theta, idx) + self.log_prior(theta)) / self.tau

    __call__ = log_prob

    def value_and_grad(self, theta, idx=None):
        return ad.value_and_grad(lambda th: self.log_prob(th, idx), theta)

    def predict(self, theta, points, masks=None):
        """u-network mean and the u-channel noise variance at (t, x) points."""
        out = np.asarray(self.u_outputs(theta, points, masks))
        mean = out[:, 0:1]
        return mean, np.broadcast_to(np.asarray(self.u_noise_var(out)), mean.shape).copy()

    def output_jacobian(self, theta, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        rows = [ad.grad(lambda th: self.u_at(th, p[None, :])[0, 0], theta) for p in pts]
        return np.array(rows).reshape(-1, self.n_params)

    def with_data(self, data):
        return replace(self, data=data)

    def with_prior_variance(self, sigma_theta2):
        return replace(self, prior=replace(self.prior, sigma_theta2=float(sigma_theta2)))

    def ggn_matrix(self, theta):
        """Generalized Gauss-Newton ``sum_c J_c^T J_c / sigma_c^2`` over all channels, divided by tau.

        ``J_c`` is the Jacobian of channel c's prediction (the PDE residual for f)
        with respect to the stacked parameters.
        """
        if self.model.heteroscedastic:
            raise NotImplementedError("GGN is implemented for homoscedastic channels only")
        point_fns = {
            "f": lambda th, p: self.source_at(th, p),
            "b": lambda th, p: self.u_at(th, p),
            "u": lambda th, p: self.u_at(th, p),
            "lambda": lambda th, p: self.lam_at(th, p),
        }
        k = self.n_params
        out = np.zeros((k, k))
        for name, ch in self.data.channels().items():
            if not len(ch):
                continue
            fn = point_fns[name]
            jac = np.array([ad.grad(lambda th: ad.tsum(fn(th, p[None, :])), theta) for p in ch.inputs])
            out += jac.T @ jac / ch.sigma**2
        return out / self.tau


def _gaussian_channel(pred, ch: Channel):
    r = ch.y - pred
    n = len(ch)
    return -0.5 * n * (LOG_2PI + 2.0 * math.log(ch.sigma)) - 0.5 * ad.tsum(r * r) / ch.sigma**2


def _heteroscedastic_channel(outputs, ch: Channel, var):
    r = ch.y - outputs[:, 0:1]
    return -0.5 * ad.tsum(LOG_2PI + ad.log(var) + r * r / var)


def pinn_log_likelihood(target: PinnPosterior, theta):
    """Sum of independent Gaussian log-likelihoods of the four channels."""
    preds = target.channel_predictions(theta)
    chans = target.data.channels()
    total = 0.0 * ad.tsum(theta) if isinstance(theta, ad.Tensor) else 0.0
    for name, pred in preds.items():
        if name == "u" and target.model.heteroscedastic:
            total = total + _heteroscedastic_channel(pred, chans[name], target.u_noise_var(pred))
        else:
            total = total + _gaussian_channel(_first_output(pred), chans[name])
    return total


def _first_output(pred):
    return pred if pred.shape[1] == 1 else pred[:, 0:1]


@dataclass(frozen=True)
class LossWeights:
    f: float = 1.0
    b: float = 1.0
    u: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if min(self.f, self.b, self.u, self.lam) < 0:
            raise ValueError("loss weights must be nonnegative")

    def of(self, name):
        return self.lam if name == "lambda" else getattr(self, name)


def pinn_point_loss(target: PinnPosterior, theta, weights: LossWeights = LossWeights()):
    """Weighted sum of per-channel mean squared errors."""
    preds = target.channel_predictions(theta)
    chans = target.data.channels()
    total = 0.0 * ad.tsum(theta) if isinstance(theta, ad.Tensor) else 0.0
    for name, pred in preds.items():
        w = weights.of(name)
        if w:
            r = chans[name].y - _first_output(pred)
            total = total + w * ad.tsum(r * r) / len(chans[name])
    return total


@dataclass(frozen=True)
class PointLoss:
    """Objective adapter so ensemble trainers can minimize the weighted PINN loss."""

    target: PinnPosterior
    weights: LossWeights = LossWeights()

    @property
    def n_params(self):
        return self.target.n_params

    @property
    def n_data(self):
        return self.target.n_data

    def init(self, rng):
        return self.target.model.xavier_init(rng)

    def loss_and_grad(self, theta, idx=None):
        return ad.value_and_grad(lambda th: pinn_point_loss(self.target, th, self.weights), theta)


# reference solver ----------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSolution:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray  # (len(t), len(x))

    def __call__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        interp = interpolate.RegularGridInterpolator((self.t, self.x), self.u, method="cubic")
        return interp(pts)

    def at_time(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        return self(np.column_stack([np.full(x.size, t), x]))


class SolverError(RuntimeError):
    pass


def reference_solve(problem: PdeProblem, nx=401, nt=101, rtol=1e-8, atol=1e-10):
    """Method of lines: second-order central differences in x, implicit BDF in t."""
    if nx < 64 or nt < 64:
        raise ValueError("reference grid needs at least 64 x 64 nodes")
    x = np.linspace(-1.0, 1.0, nx)
    t = np.linspace(0.0, 1.0, nt)
    h = x[1] - x[0]
    xi = x[1:-1]
    lam, src = problem.lam(xi), problem.source(xi)
    d, g = problem.diffusion / h**2, problem.bc_value
    lap = sparse.diags([np.ones(nx - 3), -2.0 * np.ones(nx - 2), np.ones(nx - 3)], [-1, 0, 1], format="csc")
    edge = np.zeros(nx - 2)
    edge[[0, -1]] = g

    def rhs(_t, v):
        return d * (lap @ v + edge) - lam * v**3 + src

    def jac(_t, v):
        return d * lap - sparse.diags(3.0 * lam * v**2)

    u0 = problem.initial(xi)
    sol = integrate.solve_ivp(rhs, (0.0, 1.0), u0, method="BDF", t_eval=t, jac=jac, rtol=rtol, atol=atol)
    if not sol.success:
        last = float(np.linalg.norm(rhs(sol.t[-1], sol.y[:, -1])))
        raise SolverError(f"reference solver failed at t={sol.t[-1]:.4g}: {sol.message} "
                          f"(last residual norm {last:.3e})")
    u = np.empty((nt, nx))
    u[:, 1:-1] = sol.y.T
    u[:, [0, -1]] = g
    u[0] = problem.initial(x)
    return ReferenceSolution(t, x, u)


# problem spec file -----------------------------------------------------------

def problem_spec(problem: PdeProblem, layout: DataLayout, seed):
    counts = {"N_f": len(layout.f_x),
              "N_f_collocation": len(layout.f_x) * len(layout.f_times),
              "N_b": 2 * layout.n_boundary_times + layout.n_initial,
              "N_u": len(layout.u_x) * len(layout.u_times),
              "N_lambda": len(layout.lambda_x)}
    return {
        "D": problem.diffusion,
        "lambda": "network" if problem.lambda_role == "network" else "reference",
        "lambda_id": problem.lambda_id,
        "f": problem.source_id,
        "bc": {"value": problem.bc_value},
        "ic": problem.initial_id,
        "noise": {"f": layout.sigma_f, "b": layout.noise_b, "u": layout.sigma_u, "lambda": layout.sigma_lambda},
        **counts,
        "seed": seed,
        "layout": _plain(asdict(layout)),
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def problem_from_spec(spec):
    problem = PdeProblem(diffusion=spec.get("D", 0.01),
                         lambda_role="network" if spec.get("lambda", "network") == "network" else "known",
                         lambda_id=spec.get("lambda_id", "steep"), source_id=spec.get("f", "steep"),
                         initial_id=spec.get("ic", "cos2"), bc_value=spec.get("bc", {}).get("value", 1.0))
    lay = {k: tuple(v) if isinstance(v, list) else v for k, v in spec.get("layout", {}).items()}
    return problem, DataLayout(**lay)
