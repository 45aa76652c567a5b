"""Posterior ensembles and their on-disk snapshot format.

A snapshot is a directory holding ``thetas.npy`` (M x K float64 matrix) and
``manifest.json`` (method, config, seed, sampler statistics, warnings).
Methods with extra state (Laplace, SWAG) add their own arrays next to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SNAPSHOT_VERSION = 1


@dataclass
class PosteriorEnsemble:
    """M parameter vectors plus provenance."""

    thetas: np.ndarray
    method: str
    config: dict = field(default_factory=dict)
    seed: int | None = None
    stats: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)  # named arrays saved alongside

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))

    def __len__(self):
        return self.thetas.shape[0]

    @property
    def n_params(self):
        return self.thetas.shape[1]

    def __iter__(self):
        return iter(self.thetas)

    def manifest(self):
        return {
            "version": SNAPSHOT_VERSION,
            "method": self.method,
            "config": self.config,
            "seed": self.seed,
            "stats": self.stats,
            "warnings": list(self.warnings),
            "shape": list(self.thetas.shape),
            "extras": sorted(self.extras),
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "thetas.npy", self.thetas)
        for name, arr in self.extras.items():
            np.save(d / f"{name}.npy", np.asarray(arr))
        (d / "manifest.json").write_text(json.dumps(_jsonable(self.manifest()), indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        thetas = np.load(d / "thetas.npy")
        if list(thetas.shape) != man["shape"]:
            raise ValueError(f"{d}: thetas shape {thetas.shape} disagrees with manifest {man['shape']}")
        extras = {name: np.load(d / f"{name}.npy") for name in man.get("extras", [])}
        return cls(thetas, man["method"], man.get("config", {}), man.get("seed"),
                   man.get("stats", {}), man.get("warnings", []), extras)

    @classmethod
    def merge(cls, ensembles, method=None):
        """Concatenate chains or members that share a parameterization."""
        ensembles = list(ensembles)
        thetas = np.vstack([e.thetas for e in ensembles])
        first = ensembles[0]
        return cls(thetas, method or first.method, dict(first.config), first.seed,
                   {"merged_from": [e.stats for e in ensembles]},
                   [w for e in ensembles for w in e.warnings])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
