"""Competing-risk backward joint models for dynamic prediction.

Fits the factorized joint law of censored event times, event types and
multivariate longitudinal biomarkers, and computes per-subject dynamic
predictions of event risks and future biomarker distributions.
"""

from .data import Dataset, History, Subject, history_from_subject, load_dataset, split_lts
from .estimation import CrBjmModel, bootstrap, em_fit, fit_cca, fit_crbjm
from .longitudinal import LongitudinalFit, LongitudinalSpec, LtsFit
from .numerics import EX, TP, QuadratureGrid, SplineBasis, build_grid, eval_spline, mvn_logpdf
from .prediction import (
    BiomarkerForecast,
    RiskPrediction,
    StateOccupancy,
    predict_biomarker,
    predict_cif_curve,
    predict_risk,
    predict_static,
    state_occupancy,
)
from .simulation import GeneratorConfig, simulate_cohort
from .survival import CoxFit, EventTypeFit, SurvivalFit, WeibullFit, fit_survival

__version__ = "0.1.0"

__all__ = [
    "Dataset", "History", "Subject", "history_from_subject", "load_dataset", "split_lts",
    "CrBjmModel", "bootstrap", "em_fit", "fit_cca", "fit_crbjm",
    "LongitudinalFit", "LongitudinalSpec", "LtsFit",
    "EX", "TP", "QuadratureGrid", "SplineBasis", "build_grid", "eval_spline", "mvn_logpdf",
    "BiomarkerForecast", "RiskPrediction", "StateOccupancy",
    "predict_biomarker", "predict_cif_curve", "predict_risk", "predict_static",
    "state_occupancy",
    "GeneratorConfig", "simulate_cohort",
    "CoxFit", "EventTypeFit", "SurvivalFit", "WeibullFit", "fit_survival",
]
