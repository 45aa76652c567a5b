"""Uncertainty quantification for scientific machine learning.

Bayesian and ensemble posteriors for small dense networks and physics-informed
networks, with a shared predictive summary, evaluation metrics and
post-training calibration.
"""

from .autodiff import Jet, Tensor, grad, value_and_grad
from .ensemble import PosteriorEnsemble
from .mlp import MlpModel
from .probmodel import GaussianLikelihood, LabeledDataset, LogPosterior, PriorSpec
from .uq import CalibrationMap, PredictiveSummary, summarize

__version__ = "0.1.0"

__all__ = [
    "CalibrationMap",
    "GaussianLikelihood",
    "Jet",
    "LabeledDataset",
    "LogPosterior",
    "MlpModel",
    "PosteriorEnsemble",
    "PredictiveSummary",
    "PriorSpec",
    "Tensor",
    "grad",
    "summarize",
    "value_and_grad",
]
