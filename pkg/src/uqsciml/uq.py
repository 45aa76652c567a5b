"""Predictive summaries, evaluation metrics and post-training calibration.

Every predictive distribution is approximated by ``N(mean, total)`` at each
query point. Calibration maps act on standardized residuals
``z = (u - mean) / sqrt(total)`` identically for every x, so a fitted map is
a 1-D object: a quantile function of z plus the mean and variance of the
calibrated z-distribution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, stats

DEFAULT_NP = 99
QUAD_HALF_WIDTH = 10.0
QUAD_NODES = 2001


@dataclass
class PredictiveSummary:
    """Per-point mean, aleatoric and epistemic variance.

    ``samples`` (M, N) holds the raw per-member predictions when the method
    produced them; methods with analytic epistemic variance (linearized
    Laplace, GP) leave it empty.
    """

    mean: np.ndarray
    var_a: np.ndarray
    var_e: np.ndarray
    samples: np.ndarray | None = None
    method: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        n = self.mean.size
        self.var_a = _per_point(self.var_a, n)
        self.var_e = _per_point(self.var_e, n)
        if self.var_a.shape != (n,) or self.var_e.shape != (n,):
            raise ValueError("mean, var_a and var_e must have one entry per query point")
        if np.any(self.var_a < 0) or np.any(self.var_e < 0):
            raise ValueError("variances must be nonnegative")

    def __len__(self):
        return self.mean.size

    @property
    def var(self):
        return self.var_a + self.var_e

    @property
    def std(self):
        return np.sqrt(self.var)

    def subset(self, idx):
        s = None if self.samples is None else self.samples[:, idx]
        return PredictiveSummary(self.mean[idx], self.var_a[idx], self.var_e[idx], s, self.method)

    def rescaled(self, shift_z=0.0, var_factor=1.0):
        """Shift the mean by ``shift_z`` standard deviations and scale both variance parts."""
        return PredictiveSummary(
            self.mean + self.std * shift_z,
            self.var_a * var_factor,
            self.var_e * var_factor,
            None,
            self.method,
        )

    def to_csv(self, path, x):
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(len(self), -1)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            xcols = ["x"] if x.shape[1] == 1 else [f"x{i}" for i in range(x.shape[1])]
            w.writerow([*xcols, "mean", "sigma_a", "sigma_e", "sigma_total"])
            for xi, m, a, e, t in zip(x, self.mean, np.sqrt(self.var_a), np.sqrt(self.var_e), self.std):
                w.writerow([*(repr(float(v)) for v in xi), repr(float(m)), repr(float(a)),
                            repr(float(e)), repr(float(t))])


def _per_point(v, n):
    """Broadcast a scalar to ``n`` entries; leave other shapes for the caller's check."""
    v = np.asarray(v, dtype=np.float64).ravel()
    return np.full(n, v[0]) if v.size == 1 and n != 1 else v


def summarize(samples, aleatoric=0.0, method=""):
    """Monte Carlo moments of an ensemble's predictions.

    ``samples`` is (M, N). ``aleatoric`` is a scalar noise variance
    (homoscedastic) or an (M, N) array of per-member predicted variances.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1:
        raise ValueError("need at least one ensemble member")
    mean = samples.mean(axis=0)
    var_e = np.mean((samples - mean) ** 2, axis=0)
    alea = np.asarray(aleatoric, dtype=np.float64)
    if alea.ndim == 2:
        var_a = alea.mean(axis=0)
    else:
        var_a = np.broadcast_to(alea, mean.shape)
    return PredictiveSummary(mean, var_a, var_e, samples, method)


def from_moments(mean, var_a, var_e, method=""):
    return PredictiveSummary(mean, var_a, var_e, None, method)


# metrics -------------------------------------------------------------------

def _targets(summary, u):
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size != len(summary):
        raise ValueError(f"{u.size} test values for {len(summary)} predictions")
    return u


def rl2e(summary, u):
    """Relative l2 error of the predictive mean."""
    u = _targets(summary, u)
    denom = np.sum(u**2)
    if denom == 0:
        raise ZeroDivisionError("relative error undefined for an all-zero test set")
    return float(np.sqrt(np.sum((summary.mean - u) ** 2) / denom))


def mpl(summary, u):
    """Mean predictive likelihood (density, not log) of the test values."""
    u = _targets(summary, u)
    return float(np.mean(stats.norm.pdf(u, loc=summary.mean, scale=summary.std)))


def default_levels(n_p=DEFAULT_NP):
    if n_p < 2:
        raise ValueError("need at least two probability levels")
    return np.arange(1, n_p + 1) / (n_p + 1)


def standardized_residuals(summary, u):
    u = _targets(summary, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (u - summary.mean) / summary.std
    # zero predicted spread: residual sign decides which side of every quantile u falls on
    with np.errstate(invalid="ignore"):
        z = np.where(summary.std > 0, z, np.sign(u - summary.mean) * np.inf)
    return np.where(np.isnan(z), 0.0, z)


def calibration_curve(summary, u, n_p=DEFAULT_NP, cmap=None, levels=None):
    """Expected vs observed proportions ``(p_j, p_hat_j)``."""
    p = default_levels(n_p) if levels is None else np.asarray(levels, dtype=np.float64)
    z = standardized_residuals(summary, u)
    q = (cmap or IDENTITY).quantile(p)
    p_hat = np.mean(z[None, :] <= q[:, None], axis=1)
    return p, p_hat


def rmsce(summary, u, n_p=DEFAULT_NP, cmap=None):
    """Root mean squared calibration error."""
    p, p_hat = calibration_curve(summary, u, n_p, cmap)
    return float(np.sqrt(np.mean((p - p_hat) ** 2)))


def piw(summary, p=0.95, cmap=None):
    """Mean width of the central prediction interval at level ``p``."""
    lo, hi = (1.0 - p) / 2.0, (1.0 + p) / 2.0
    q = (cmap or IDENTITY).quantile(np.array([lo, hi]))
    return float(np.mean(summary.std * (q[1] - q[0])))


def sdcv(summary):
    """Coefficient of variation of the predicted standard deviations."""
    s = summary.std
    # centre on one entry first so a constant vector gives exactly zero
    return float(np.std(s - s[0]) / np.mean(s))


def nip_g(var_test, var_gold):
    """Normalized inner product of two predicted-variance vectors."""
    a, b = (np.asarray(v.var if isinstance(v, PredictiveSummary) else v, dtype=np.float64).ravel()
            for v in (var_test, var_gold))
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def kl_g(summary_test, summary_gold):
    """Mean KL(gold || test) between Gaussian predictive distributions."""
    m0, v0 = summary_gold.mean, summary_gold.var
    m1, v1 = summary_test.mean, summary_test.var
    kl = 0.5 * (np.log(v1 / v0) + (v0 + (m0 - m1) ** 2) / v1 - 1.0)
    return float(np.mean(kl))


def metrics_report(summary, u, method="", seed=None, gold=None, n_p=DEFAULT_NP, cmap=None):
    """All metrics in the JSON report schema."""
    s = summary if cmap is None else cmap.apply(summary)
    out = {
        "method": method or summary.method,
        "seed": seed,
        "RL2E": rl2e(s, u),
        "MPL": mpl(s, u),
        "RMSCE": rmsce(summary, u, n_p, cmap),
        "PIW": piw(summary, 0.95, cmap),
        "SDCV": sdcv(s),
    }
    if gold is not None:
        out["NIP_G"] = nip_g(s, gold)
        out["KL_G"] = kl_g(s, gold)
    return out


def write_calibration_curve(path, p, p_hat):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "p_hat"])
        for a, b in zip(p, p_hat):
            w.writerow([repr(float(a)), repr(float(b))])


# calibration ---------------------------------------------------------------

@dataclass
class CalibrationMap:
    """Post-hoc transform of the standardized predictive CDF.

    kind ``gaussian`` (identity), ``scale`` (``params['s']``), ``isotonic``
    (knot table ``knots_p``/``knots_q`` of the map Q on [0, 1]) or ``crude``
    (sorted residuals ``residuals`` with their mean and std).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("gaussian", "scale", "isotonic", "crude"):
            raise ValueError(f"unknown calibration kind {self.kind!r}")
        if self.kind == "isotonic":
            self._z_grid, self._cdf_grid = _iso_tables(self.q)
        if self.kind == "crude":
            self.params["residuals"] = np.sort(np.asarray(self.params["residuals"], dtype=np.float64))

    # Q for the isotonic map
    def q(self, p):
        kp, kq = np.asarray(self.params["knots_p"]), np.asarray(self.params["knots_q"])
        return np.interp(p, kp, kq)

    def cdf(self, z):
        """Calibrated CDF of the standardized residual."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "gaussian":
            return stats.norm.cdf(z)
        if self.kind == "scale":
            return stats.norm.cdf(z / self.params["s"])
        if self.kind == "isotonic":
            return self.q(stats.norm.cdf(z))
        e = self.params["residuals"]
        return np.searchsorted(e, z, side="right") / e.size

    def quantile(self, p):
        """Standardized quantile(s) ``z_p`` of the calibrated distribution."""
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "gaussian":
            return stats.norm.ppf(p)
        if self.kind == "scale":
            return self.params["s"] * stats.norm.ppf(p)
        if self.kind == "isotonic":
            # generalized inverse: smallest z on the grid with F(z) >= p
            i = np.searchsorted(self._cdf_grid, p, side="left")
            return self._z_grid[np.clip(i, 0, self._z_grid.size - 1)]
        e = self.params["residuals"]
        idx = np.clip(np.floor(p * e.size).astype(int), 0, e.size - 1)
        return e[idx]

    def z_moments(self):
        """Mean and variance of the calibrated standardized residual."""
        if self.kind == "gaussian":
            return 0.0, 1.0
        if self.kind == "scale":
            return 0.0, float(self.params["s"]) ** 2
        if self.kind == "crude":
            return float(self.params["mu_eps"]), float(self.params["sigma_eps"]) ** 2
        return calibrated_moments(self.cdf)

    def apply(self, summary):
        """Summary with calibrated mean and total variance (split kept proportional)."""
        m, v = self.z_moments()
        return summary.rescaled(m, v)

    def to_json(self):
        d = {"kind": self.kind}
        for k, v in self.params.items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, {k: np.asarray(v) if isinstance(v, list) else v for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


IDENTITY = CalibrationMap("gaussian")


def _iso_tables(q):
    z = np.linspace(-QUAD_HALF_WIDTH, QUAD_HALF_WIDTH, 20001)
    return z, np.maximum.accumulate(q(stats.norm.cdf(z)))


def calibrated_moments(cdf, half_width=QUAD_HALF_WIDTH, nodes=QUAD_NODES):
    """Mean and variance of a distribution given its CDF, by tail integrals.

    E[Z] = int_0^inf (1 - F) - int_-inf^0 F and
    E[Z^2] = int_0^inf 1 - [F(sqrt w) - F(-sqrt w)] dw, truncated to
    |z| <= half_width and integrated with composite Simpson on ``nodes`` points.
    """
    zp = np.linspace(0.0, half_width, nodes // 2 + 1)
    zn = -zp
    upper = 1.0 - cdf(zp)
    lower = cdf(zn)
    mean = integrate.simpson(upper, x=zp) - integrate.simpson(lower, x=zp)
    # substitute w = z^2 so the grid stays uniform in z
    second = integrate.simpson(2.0 * zp * (upper + lower), x=zp)
    return float(mean), float(second - mean**2)


def _calib_inputs(summary, u):
    z = standardized_residuals(summary, u)
    if z.size == 0:
        raise ValueError("empty calibration set")
    return z


def calibrate_scale(summary, u, metric="rmsce", n_p=DEFAULT_NP, bounds=(-3.0, 3.0)):
    """Constant factor s on the predicted std, chosen to minimize ``metric`` on the calibration set."""
    _calib_inputs(summary, u)

    def objective(log_s):
        cmap = CalibrationMap("scale", {"s": float(np.exp(log_s))})
        if metric == "rmsce":
            return rmsce(summary, u, n_p, cmap)
        if metric == "nll":
            return -float(np.mean(stats.norm.logpdf(u, summary.mean, np.exp(log_s) * summary.std)))
        raise ValueError(f"unknown calibration metric {metric!r}")

    # RMSCE is piecewise constant in s: bracket on a coarse grid, then golden-section inside
    grid = np.linspace(*bounds, 61)
    vals = np.array([objective(g) for g in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-4})
    candidates = [(vals[i], grid[i]), (objective(0.0), 0.0)]
    if res.success:
        candidates.append((float(res.fun), float(res.x)))
    best_val, best_log_s = min(candidates, key=lambda t: (t[0], abs(t[1])))
    return CalibrationMap("scale", {"s": float(np.exp(best_log_s)), "metric": metric,
                                    "objective": float(best_val)})


def pava(y, w=None):
    """Pool-adjacent-violators: least-squares nondecreasing fit to ``y``."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            wsum = wts[-2] + wts[-1]
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / wsum
            n = sizes[-2] + sizes[-1]
            del vals[-1], wts[-1], sizes[-1]
            vals[-1], wts[-1], sizes[-1] = v, wsum, n
    return np.repeat(vals, sizes)


def calibrate_isotonic(summary, u):
    """Isotonic recalibration map Q fitted to (P(u_i|x_i), empirical CDF of those values)."""
    z = _calib_inputs(summary, u)
    if z.size < 2:
        raise ValueError("isotonic calibration needs at least two calibration points")
    pit = np.sort(stats.norm.cdf(z))
    target = np.searchsorted(pit, pit, side="right") / pit.size
    fitted = pava(target)
    # collapse duplicate knots, then pin the ends so Q maps [0, 1] onto [0, 1]
    kp, idx = np.unique(pit, return_index=True)
    kq = np.array([fitted[pit == v].max() for v in kp])
    if kp[0] > 0.0:
        kp, kq = np.r_[0.0, kp], np.r_[0.0, kq]
    if kp[-1] < 1.0:
        kp, kq = np.r_[kp, 1.0], np.r_[kq, 1.0]
    kq = np.clip(np.maximum.accumulate(kq), 0.0, 1.0)
    return CalibrationMap("isotonic", {"knots_p": kp, "knots_q": kq})


def calibrate_crude(summary, u):
    """Empirical distribution of the standardized calibration residuals."""
    z = _calib_inputs(summary, u)
    if z.size < 2:
        raise ValueError("CRUDE calibration needs at least two calibration points")
    e = np.sort(z)
    return CalibrationMap("crude", {"residuals": e, "mu_eps": float(e.mean()), "sigma_eps": float(e.std())})


CALIBRATORS = {
    "scale": calibrate_scale,
    "isotonic": calibrate_isotonic,
    "crude": calibrate_crude,
}
