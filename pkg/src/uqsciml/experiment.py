"""Experiment manifests and the generate / train / evaluate / calibrate / compare steps.

A manifest is a TOML table::

    seed = 0
    output_dir = "runs/hmc"

    [problem]
    id = "function"          # or "pinn"

    [data]                    # problem-specific, see FUNCTION_DATA / PINN_DATA
    n_train = 32

    [model]
    hidden = [50, 50]
    sigma_u = 0.1

    [method]
    id = "hmc"
    # any method hyperparameter overrides, e.g. step_size = 0.05

Every key not given falls back to a default; the fully resolved manifest is
written next to the outputs so nothing implicit escapes the record.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import approx, ensembles, gp, mcmc, pinn
from .ensemble import PosteriorEnsemble
from .mlp import MlpModel
from .optim import TrainConfig, map_fit
from .predict import gp_summary, predictive_summary
from .probmodel import GaussianLikelihood, LabeledDataset, LogPosterior, PriorSpec, generate_student_t_noise
from .uq import CALIBRATORS, CalibrationMap, calibration_curve, metrics_report, rmsce, write_calibration_curve

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("hmc", "ld", "sgld", "mfvi", "mcd", "laplace", "dens", "sens", "swag", "gp")
PINN_METHODS = ("hmc", "ld", "mfvi", "laplace", "dens", "sens", "swag")
PROBLEMS = ("function", "pinn")


class UsageError(ValueError):
    """Bad manifest or command line; maps to exit code 2."""


# defaults ----------------------------------------------------------------------

FUNCTION_DATA = {
    "function": "jump_sine",
    "noise": "gaussian",  # or "student_t"
    "sigma": 0.1,
    "n_train": 32,
    "n_val": 32,
    "n_calib": 100,
    "n_test": 200,
    "train_range": [-0.8, 0.8],
    "test_range": [-1.0, 1.0],
}

PINN_DATA = {
    "reference_nx": 401,
    "reference_nt": 101,
    "test_time": 1.0,
    "n_test": 101,
    "n_calib": 40,
    "sigma": 0.05,
}

MODEL = {"hidden": [50, 50], "sigma_u": 0.1, "prior_var": 1.0, "tau": 1.0, "heteroscedastic": False}

METHOD_DEFAULTS = {
    "function": {
        "hmc": {"step_size": 0.1, "n_leapfrog": 50, "burn_in": 2000, "n_samples": 1000, "gibbs": False},
        "ld": {"step_size": 1e-4, "burn_in": 5000, "n_samples": 1000},
        "sgld": {"step_size": 1e-4, "burn_in": 5000, "n_samples": 1000, "batch_size": 16},
        "mfvi": {"lr": 1e-3, "steps": 4450, "n_samples": 1000, "batch_size": 32, "early_stopping": True},
        "mcd": {"lr": 1e-3, "steps": 20000, "n_samples": 1000, "rate": 0.05},
        "laplace": {"lr": 1e-2, "steps": 30000, "prior_grid": None},
        "dens": {"n_members": 10, "lr": 1e-4, "steps": 20000, "weight_decay": 5e-4},
        "sens": {"eps_init": 1e-2, "eps_final": 1e-4, "steps_total": 20000, "t_cycles": 20, "t_used": 20},
        "swag": {"eps_init": 1e-2, "eps_final": 1e-4, "steps_total": 20000, "t_cycles": 10, "t_used": 5,
                 "n_samples": 50},
        "gp": {"lengthscale": 0.2, "variance": 1.0, "grid_search": True},
    },
    "pinn": {
        "hmc": {"step_size": 1e-3, "n_leapfrog": 50, "burn_in": 5000, "n_samples": 1000,
                "warm_start_steps": 30000, "warm_start_lr": 1e-3},
        "ld": {"step_size": 1e-6, "burn_in": 5000, "n_samples": 1000},
        "mfvi": {"lr": 1e-3, "steps": 10000, "n_samples": 1000, "batch_size": None, "early_stopping": False},
        "laplace": {"lr": 1e-3, "steps": 10000, "prior_grid": None},
        "dens": {"n_members": 10, "lr": 1e-3, "steps": 5000, "weight_decay": 0.1},
        "sens": {"eps_init": 1e-2, "eps_final": 1e-4, "steps_total": 20000, "t_cycles": 20, "t_used": 20},
        "swag": {"eps_init": 1e-2, "eps_final": 1e-4, "steps_total": 20000, "t_cycles": 10, "t_used": 5,
                 "n_samples": 50},
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_manifest(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise UsageError(f"cannot read manifest {path}: {err}") from None
    return resolve_manifest(raw)


def resolve_manifest(raw):
    """Fill every default and validate ids; returns a new dict."""
    problem = raw.get("problem", {}).get("id", "function")
    if problem not in PROBLEMS:
        raise UsageError(f"unknown problem id {problem!r}; choose from {', '.join(PROBLEMS)}")
    method = raw.get("method", {}).get("id", "hmc")
    allowed = METHODS if problem == "function" else PINN_METHODS
    if method not in allowed:
        raise UsageError(f"unknown method id {method!r} for problem {problem!r}; choose from {', '.join(allowed)}")
    data_defaults = FUNCTION_DATA if problem == "function" else PINN_DATA
    method_params = {k: v for k, v in raw.get("method", {}).items() if k != "id"}
    unknown = set(method_params) - set(METHOD_DEFAULTS[problem][method])
    if unknown:
        raise UsageError(f"unknown {method} hyperparameters: {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise UsageError("seed must be an integer in [0, 2^64)")
    return {
        "seed": seed,
        "output_dir": raw.get("output_dir", f"runs/{problem}-{method}-{seed}"),
        "problem": _merge({"id": problem}, raw.get("problem")),
        "data": _merge(data_defaults, raw.get("data")),
        "model": _merge(MODEL, raw.get("model")),
        "method": _merge({"id": method, **METHOD_DEFAULTS[problem][method]}, method_params),
        "calibration": _merge({"method": "scale"}, raw.get("calibration")),
    }


def stream(seed, purpose):
    """Independent counter-based (Philox) generator for one named purpose."""
    key = zlib.crc32(purpose.encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed % 2**64, key])))


# problems ------------------------------------------------------------------------

def jump_sine(x):
    """Smooth oscillation with a unit jump at x = 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.sin(3.0 * x) + np.where(x > 0.0, 1.0, 0.0)


def sine(x):
    return np.sin(3.0 * np.asarray(x, dtype=np.float64))


TEST_FUNCTIONS = {"jump_sine": jump_sine, "sine": sine}


def _noisy(fn, x, data, rng):
    clean = fn(x)
    if data["noise"] == "gaussian":
        return clean + data["sigma"] * rng.standard_normal(x.shape), clean
    if data["noise"] == "student_t":
        return clean + generate_student_t_noise(x, rng, scale=data["sigma"]), clean
    raise UsageError(f"unknown noise model {data['noise']!r}")


def generate(man, out_dir):
    """Write train/val/calib/test CSVs (and, for PINNs, channel files and the problem spec)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = stream(man["seed"], "data")
    data = man["data"]
    if man["problem"]["id"] == "function":
        fn = TEST_FUNCTIONS.get(data["function"])
        if fn is None:
            raise UsageError(f"unknown test function {data['function']!r}")
        lo, hi = data["train_range"]
        splits = {}
        for name in ("train", "val", "calib"):
            x = rng.uniform(lo, hi, data[f"n_{name}"])
            u, _ = _noisy(fn, x, data, rng)
            splits[name] = LabeledDataset(x, u)
        xt = np.linspace(*data["test_range"], data["n_test"])
        ut, clean = _noisy(fn, xt, data, rng)
        splits["test"] = LabeledDataset(xt, ut)
        splits["test_clean"] = LabeledDataset(xt, clean)
    else:
        problem, layout = _pinn_problem(man)
        sol = pinn.reference_solve(problem, data["reference_nx"], data["reference_nt"])
        pdata = pinn.generate_data(problem, layout, rng, sol)
        pdata.save(out / "pinn_data.csv")
        (out / "problem.json").write_text(json.dumps(pinn.problem_spec(problem, layout, man["seed"]), indent=2))
        xt = np.linspace(-1.0, 1.0, data["n_test"])
        pts = np.column_stack([np.full(xt.size, data["test_time"]), xt])
        clean = sol(pts)
        splits = {
            "test": LabeledDataset(pts, clean + data["sigma"] * rng.standard_normal(xt.size)),
            "test_clean": LabeledDataset(pts, clean),
        }
        xc = rng.uniform(-1.0, 1.0, data["n_calib"])
        pc = np.column_stack([np.full(xc.size, data["test_time"]), xc])
        splits["calib"] = LabeledDataset(pc, sol(pc) + data["sigma"] * rng.standard_normal(xc.size))
    for name, ds in splits.items():
        ds.to_csv(out / f"{name}.csv")
    write_resolved(man, out)
    return out


def _pinn_problem(man):
    p = man["problem"]
    problem = pinn.PdeProblem(diffusion=p.get("D", 0.01),
                              lambda_role=p.get("lambda_role", "network"),
                              lambda_id=p.get("lambda_id", "steep"), source_id=p.get("f", "steep"),
                              initial_id=p.get("ic", "cos2"), bc_value=p.get("bc", 1.0))
    s = man["data"]["sigma"]
    layout = pinn.DataLayout(sigma_f=s, sigma_u=s, sigma_lambda=s)
    return problem, layout


def build_target(man, data_dir):
    """The log-posterior target for the manifest's problem, from generated data files."""
    d = Path(data_dir)
    model = man["model"]
    prior = PriorSpec(model["prior_var"])
    if man["problem"]["id"] == "function":
        train = LabeledDataset.from_csv(d / "train.csv")
        hetero = model["heteroscedastic"]
        net = MlpModel.build(1, tuple(model["hidden"]), 2 if hetero else 1)
        lik = GaussianLikelihood(model["sigma_u"], head=1 if hetero else None)
        return LogPosterior(net, train, lik, prior, model["tau"])
    problem, _ = _pinn_problem(man)
    hidden = tuple(model["hidden"])
    nets = pinn.PinnModel(MlpModel((2, *hidden, 2 if model["heteroscedastic"] else 1)),
                          MlpModel((1, *hidden, 1)) if problem.lambda_role == "network" else None)
    return pinn.PinnPosterior(problem, pinn.PinnDataset.load(d / "pinn_data.csv"), nets, prior, model["tau"])


# training ------------------------------------------------------------------------

def _objective(target):
    return pinn.PointLoss(target) if isinstance(target, pinn.PinnPosterior) else ensembles.DataLoss(target)


def train(man, out_dir):
    """Generate data, fit the configured method and write the ensemble snapshot."""
    out = Path(out_dir)
    generate(man, out)
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("uqsciml")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        ens = fit_method(man, out)
    finally:
        root.removeHandler(handler)
        handler.close()
    ens.seed = man["seed"]
    ens.save(out / "snapshot")
    return ens


def fit_method(man, data_dir):
    m = dict(man["method"])
    method = m.pop("id")
    seed = man["seed"]
    init_rng, sampler_rng = stream(seed, "init"), stream(seed, "sampler")
    if method == "gp":
        return _fit_gp(man, data_dir, m)
    target = build_target(man, data_dir)
    theta0 = target.model.xavier_init(init_rng)

    if method == "hmc":
        warm = m.pop("warm_start_steps", 0)
        warm_lr = m.pop("warm_start_lr", 1e-3)
        use_gibbs = m.pop("gibbs", False)
        if warm:
            theta0, _ = map_fit(target, theta0, TrainConfig(lr=warm_lr, steps=warm))
        cfg = mcmc.HmcConfig(**m)
        return mcmc.hmc_sample(target, cfg, sampler_rng, theta0,
                               gibbs=mcmc.GibbsConfig() if use_gibbs else None)
    if method in ("ld", "sgld"):
        return mcmc.langevin_sample(target, m["step_size"], m["burn_in"], m["n_samples"], sampler_rng, theta0,
                                    batch_size=m.get("batch_size"), method=method)
    if method == "mfvi":
        early = m.pop("early_stopping")
        if early and not (Path(data_dir) / "val.csv").exists():
            raise UsageError("MFVI early stopping needs a validation split")
        val = LabeledDataset.from_csv(Path(data_dir) / "val.csv") if early else None
        q = approx.mfvi_fit(target, approx.MfviConfig(**m), sampler_rng, theta0, validation=val)
        ens = q.sample(m["n_samples"], sampler_rng)
        ens.config = m
        return ens
    if method == "mcd":
        return approx.mcd_fit(target, approx.McdConfig(**m), sampler_rng, theta0)
    if method == "laplace":
        map_cfg = TrainConfig(lr=m["lr"], steps=m["steps"])
        if m["prior_grid"]:
            best, fit, _ = approx.laplace_grid_search(target, m["prior_grid"], map_cfg, sampler_rng, theta0)
            return fit.to_ensemble({**m, "prior_var_selected": best})
        fit = approx.laplace_fit(target, map_cfg, sampler_rng, theta0)
        return fit.to_ensemble(m)
    objective = _objective(target)
    if method == "dens":
        return ensembles.deep_ensemble_fit(objective, ensembles.DeepEnsembleConfig(**m), sampler_rng)
    if method == "sens":
        return ensembles.snapshot_ensemble_fit(objective, ensembles.CyclicalSchedule(**m), sampler_rng)
    if method == "swag":
        n = m.pop("n_samples")
        fit = ensembles.swag_fit(objective, ensembles.CyclicalSchedule(**m), sampler_rng)
        ens = ensembles.swag_sample(fit, n, sampler_rng)
        ens.extras = {"swag_mean": fit.mean, "swag_diag": fit.diag_var, "swag_deviations": fit.deviations}
        ens.config = {**m, "n_samples": n}
        return ens
    raise UsageError(f"unknown method {method!r}")  # pragma: no cover - resolve_manifest filters


def _fit_gp(man, data_dir, params):
    d = Path(data_dir)
    train = LabeledDataset.from_csv(d / "train.csv")
    noise = man["model"]["sigma_u"] ** 2
    kern = gp.SquaredExponential(params["lengthscale"], params["variance"])
    if params["grid_search"]:
        val = LabeledDataset.from_csv(d / "val.csv")
        kern = gp.gp_grid_search(train.x, train.u, val.x, val.u, np.geomspace(0.02, 2.0, 25),
                                 np.geomspace(0.1, 10.0, 9), noise)
    cfg = {**params, "lengthscale": kern.lengthscale, "variance": kern.variance}
    return PosteriorEnsemble(np.array([[kern.lengthscale, kern.variance]]), "gp", cfg)


# evaluation ----------------------------------------------------------------------

def summary_for(man, run_dir, ens, split):
    """PredictiveSummary of a trained snapshot on one stored split."""
    run = Path(run_dir)
    ds = LabeledDataset.from_csv(run / f"{split}.csv")
    if ens.method == "gp":
        train = LabeledDataset.from_csv(run / "train.csv")
        lengthscale, variance = ens.thetas[0]
        model = gp.gp_fit(train.x, train.u, gp.SquaredExponential(lengthscale, variance),
                          man["model"]["sigma_u"] ** 2)
        return gp_summary(model, ds.x), ds
    target = build_target(man, run)
    return predictive_summary(target, ens, ds.x, rng=stream(man["seed"], f"predict-{split}")), ds


def read_resolved(run_dir):
    return json.loads((Path(run_dir) / "manifest.resolved.json").read_text())


def write_resolved(man, out_dir):
    Path(out_dir, "manifest.resolved.json").write_text(json.dumps(man, indent=2, sort_keys=True))


def evaluate(run_dir, out_dir=None, gold_dir=None, n_p=99):
    """Metrics JSON, prediction CSV and calibration-curve CSV for a trained run."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    man = read_resolved(run)
    ens = PosteriorEnsemble.load(run / "snapshot")
    summary, test = summary_for(man, run, ens, "test")
    clean = LabeledDataset.from_csv(run / "test_clean.csv")
    gold = None
    if gold_dir is not None:
        gman = read_resolved(gold_dir)
        gold, _ = summary_for(gman, gold_dir, PosteriorEnsemble.load(Path(gold_dir) / "snapshot"), "test")
    report = metrics_report(summary, test.u, man["method"]["id"], man["seed"], gold, n_p)
    # RL2E measures the mean against the noise-free reference
    report["RL2E"] = float(np.linalg.norm(summary.mean - clean.u[:, 0]) / np.linalg.norm(clean.u[:, 0]))
    report["warnings"] = list(ens.warnings)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    summary.to_csv(out / "predictions.csv", test.x)
    write_calibration_curve(out / "calibration_curve.csv", *calibration_curve(summary, test.u, n_p))
    write_resolved(man, out)
    return report


def calibrate(run_dir, method, out_dir=None, n_p=99):
    """Fit a calibration map on the calibration split; report test metrics before and after."""
    if method not in CALIBRATORS:
        raise UsageError(f"unknown calibration method {method!r}; choose from {', '.join(CALIBRATORS)}")
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    man = read_resolved(run)
    ens = PosteriorEnsemble.load(run / "snapshot")
    cal_summary, cal = summary_for(man, run, ens, "calib")
    cmap = CALIBRATORS[method](cal_summary, cal.u)
    cmap.save(out / f"calibration_{method}.json")
    test_summary, test = summary_for(man, run, ens, "test")
    before = metrics_report(test_summary, test.u, man["method"]["id"], man["seed"], n_p=n_p)
    after = metrics_report(test_summary, test.u, man["method"]["id"], man["seed"], n_p=n_p, cmap=cmap)
    report = {
        "method": man["method"]["id"],
        "seed": man["seed"],
        "calibration": method,
        "calib_RMSCE_before": rmsce(cal_summary, cal.u, n_p),
        "calib_RMSCE_after": rmsce(cal_summary, cal.u, n_p, cmap),
        "before": before,
        "after": after,
    }
    if cmap.kind == "scale":
        report["s"] = cmap.params["s"]
    (out / f"calibration_report_{method}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_calibration_curve(out / f"calibration_curve_{method}.csv",
                            *calibration_curve(test_summary, test.u, n_p, cmap))
    write_resolved(man, out)
    return report


COMPARE_COLUMNS = ("method", "seed", "RL2E", "MPL", "RMSCE", "PIW", "SDCV", "NIP_G", "KL_G")


def compare(metric_files, out_path):
    """One row per metrics JSON, columns in the order of the comparison tables."""
    rows = []
    for path in metric_files:
        try:
            rows.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read metrics file {path}: {err}") from None
    with Path(out_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in COMPARE_COLUMNS])
    return rows
