"""Versioned model artifact with canonical serialization.

The artifact is canonical JSON (sorted keys, repr-exact floats), so
loading and re-saving is byte-identical and refitting with the same seed
reproduces the same bytes.  Wall-clock timestamps are deliberately
excluded from provenance to keep artifacts reproducible.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import SchemaError
from .estimation import CrBjmModel
from .longitudinal import LongitudinalFit, LongitudinalSpec, LtsFit
from .numerics import SplineBasis
from .survival import CoxFit, EventTypeFit, SurvivalFit, WeibullFit

FORMAT_VERSION = 1


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def model_to_dict(model: CrBjmModel) -> dict:
    tm = model.survival.time_model
    if isinstance(tm, WeibullFit):
        time_model = {"kind": "weibull", "shape": tm.shape, "coef": _arr(tm.coef)}
    else:
        time_model = {
            "kind": "cox",
            "coef": _arr(tm.coef),
            "baseline_times": _arr(tm.baseline_times),
            "baseline_cumhaz": _arr(tm.baseline_cumhaz),
            "tail_rate": tm.tail_rate,
        }
    etm = model.survival.event_type_model
    event_type = None
    if etm is not None:
        event_type = {
            "basis": {"kind": etm.basis.kind, "knots": list(etm.basis.knots)},
            "coef": _arr(etm.coef),
            "n_event_types": etm.n_event_types,
            "separation": bool(etm.separation),
        }
    fit = model.longitudinal
    lts = None
    if fit.lts is not None:
        lts = {
            "coef": _arr(fit.lts.coef),
            "omega": _arr(fit.lts.omega),
            "sigma2": _arr(fit.lts.sigma2),
            "column_names": list(fit.lts.column_names),
        }
    spec = model.spec
    return {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "tau_max": model.tau_max,
        "quadrature": {
            "rule": "midpoint-mass",
            "width": model.quadrature_width,
            "t_end_ex": model.t_end_ex,
            "prediction_width": model.prediction_width,
        },
        "covariate_names": list(model.covariate_names),
        "biomarker_names": list(model.biomarker_names),
        "spec": {
            "n_biomarkers": spec.n_biomarkers,
            "n_covariates": spec.n_covariates,
            "n_event_types": spec.n_event_types,
            "trajectory_degree": spec.trajectory_degree,
            "phi": spec.phi,
            "random_effects": spec.random_effects,
            "use_type": spec.use_type,
            "use_time": spec.use_time,
            "use_time_type": spec.use_time_type,
        },
        "survival": {"time_model": time_model, "event_type": event_type,
                     "n_event_types": model.survival.n_event_types},
        "longitudinal": {
            "coef": _arr(fit.coef),
            "omega": _arr(fit.omega),
            "sigma2": _arr(fit.sigma2),
            "column_names": list(fit.column_names),
            "lts": lts,
        },
        "provenance": dict(model.provenance),
    }


def model_from_dict(d: dict) -> CrBjmModel:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"artifact format version {version!r} is not supported "
                          f"(expected {FORMAT_VERSION})")
    tmd = d["survival"]["time_model"]
    if tmd["kind"] == "weibull":
        tm = WeibullFit(shape=float(tmd["shape"]), coef=np.asarray(tmd["coef"], dtype=float))
    else:
        tm = CoxFit(
            coef=np.asarray(tmd["coef"], dtype=float),
            baseline_times=np.asarray(tmd["baseline_times"], dtype=float),
            baseline_cumhaz=np.asarray(tmd["baseline_cumhaz"], dtype=float),
            tail_rate=float(tmd["tail_rate"]),
        )
    etd = d["survival"]["event_type"]
    etm = None
    if etd is not None:
        etm = EventTypeFit(
            basis=SplineBasis(etd["basis"]["kind"], tuple(etd["basis"]["knots"])),
            coef=np.asarray(etd["coef"], dtype=float),
            n_event_types=int(etd["n_event_types"]),
            separation=bool(etd["separation"]),
        )
    survival = SurvivalFit(time_model=tm, event_type_model=etm,
                           n_event_types=int(d["survival"]["n_event_types"]))
    ld = d["longitudinal"]
    lts = None
    if ld["lts"] is not None:
        lts = LtsFit(
            coef=np.asarray(ld["lts"]["coef"], dtype=float),
            omega=np.asarray(ld["lts"]["omega"], dtype=float),
            sigma2=np.asarray(ld["lts"]["sigma2"], dtype=float),
            column_names=tuple(ld["lts"]["column_names"]),
        )
    fit = LongitudinalFit(
        coef=np.asarray(ld["coef"], dtype=float),
        omega=np.asarray(ld["omega"], dtype=float),
        sigma2=np.asarray(ld["sigma2"], dtype=float),
        column_names=tuple(ld["column_names"]),
        lts=lts,
    )
    spec = LongitudinalSpec(**d["spec"])
    quad = d["quadrature"]
    return CrBjmModel(
        variant=d["variant"],
        spec=spec,
        survival=survival,
        longitudinal=fit,
        tau_max=float(d["tau_max"]),
        quadrature_width=float(quad["width"]),
        t_end_ex=float(quad["t_end_ex"]),
        prediction_width=None if quad.get("prediction_width") is None
        else float(quad["prediction_width"]),
        covariate_names=tuple(d["covariate_names"]),
        biomarker_names=tuple(d["biomarker_names"]),
        provenance=dict(d["provenance"]),
    )


def dumps_canonical(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def save_artifact(model: CrBjmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_canonical(model_to_dict(model)))


def load_artifact(path) -> CrBjmModel:
    with open(path, encoding="utf-8") as f:
        return model_from_dict(json.load(f))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
