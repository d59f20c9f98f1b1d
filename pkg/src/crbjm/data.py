"""Core domain types and cohort ingestion.

A cohort is stored long-format: one subjects table (id, time, event,
covariates) and one longitudinal table (id, biomarker, time, value).
Measurement times must lie in (0, observed_time]; rows recorded exactly at
t = 0 are treated as longitudinal data at an epsilon-shifted time rather
than as baseline covariates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    DuplicateMeasurement,
    EventTypeOutOfRange,
    MeasurementAfterExit,
    MissingSubject,
    NonPositiveTime,
    SchemaError,
)

T_ZERO_SHIFT = 1e-6  # years; applied to measurements recorded at t = 0


@dataclass(frozen=True)
class Subject:
    """One cohort member.

    event_type 0 encodes censoring; 1..J encode observed terminal events.
    measurements[m] is a (times, values) pair of aligned arrays for
    biomarker m, times non-decreasing within (0, observed_time].
    """

    id: str
    covariates: np.ndarray
    observed_time: float
    event_type: int
    measurements: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.observed_time > 0:
            raise NonPositiveTime(f"subject {self.id}: observed_time must be > 0")
        if self.event_type < 0:
            raise EventTypeOutOfRange(f"subject {self.id}: event_type {self.event_type}")
        cov = np.ascontiguousarray(np.asarray(self.covariates, dtype=float))
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        frozen = []
        for m, (times, values) in enumerate(self.measurements):
            t = np.asarray(times, dtype=float)
            v = np.asarray(values, dtype=float)
            if t.shape != v.shape:
                raise SchemaError(f"subject {self.id}: ragged biomarker {m}")
            if t.size:
                if np.any(t <= 0):
                    raise NonPositiveTime(f"subject {self.id}: non-positive measurement time")
                if np.any(t > self.observed_time + 1e-12):
                    raise MeasurementAfterExit(
                        f"subject {self.id}: measurement after exit time {self.observed_time}"
                    )
                if np.any(np.diff(t) < 0):
                    raise SchemaError(f"subject {self.id}: measurement times not sorted")
            t.setflags(write=False)
            v.setflags(write=False)
            frozen.append((t, v))
        object.__setattr__(self, "measurements", tuple(frozen))

    @property
    def is_censored(self) -> bool:
        return self.event_type == 0

    @property
    def n_measurements(self) -> int:
        return int(sum(t.size for t, _ in self.measurements))


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[Subject, ...]
    n_event_types: int
    n_biomarkers: int
    covariate_names: tuple[str, ...]
    biomarker_names: tuple[str, ...]
    tau_max: float

    def __post_init__(self):
        p = len(self.covariate_names)
        for s in self.subjects:
            if s.covariates.size != p:
                raise SchemaError(f"subject {s.id}: expected {p} covariates")
            if len(s.measurements) != self.n_biomarkers:
                raise SchemaError(f"subject {s.id}: expected {self.n_biomarkers} biomarkers")
            if s.event_type > self.n_event_types:
                raise EventTypeOutOfRange(
                    f"subject {s.id}: event_type {s.event_type} > J={self.n_event_types}"
                )
        event_times = [s.observed_time for s in self.subjects if s.event_type != 0]
        if event_times and self.tau_max < max(event_times) - 1e-12:
            raise SchemaError("tau_max below an observed event time")

    @property
    def n(self) -> int:
        return len(self.subjects)

    def covariate_matrix(self) -> np.ndarray:
        return np.array([s.covariates for s in self.subjects])


@dataclass(frozen=True)
class History:
    """Observed data of a prediction subject up to the landmark time s."""

    covariates: np.ndarray
    prediction_time: float
    measurements: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        cov = np.ascontiguousarray(np.asarray(self.covariates, dtype=float))
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        frozen = []
        for times, values in self.measurements:
            t = np.asarray(times, dtype=float)
            v = np.asarray(values, dtype=float)
            if np.any(t > self.prediction_time + 1e-12):
                raise MeasurementAfterExit("history contains measurements past s")
            t.setflags(write=False)
            v.setflags(write=False)
            frozen.append((t, v))
        object.__setattr__(self, "measurements", tuple(frozen))

    @property
    def n_measurements(self) -> int:
        return int(sum(t.size for t, _ in self.measurements))


def history_from_subject(subject: Subject, s: float) -> History:
    """Truncate a subject's measurement series at the landmark time s."""
    meas = []
    for times, values in subject.measurements:
        keep = times <= s + 1e-12
        meas.append((times[keep], values[keep]))
    return History(covariates=subject.covariates, prediction_time=s, measurements=tuple(meas))


def default_tau_max(subjects) -> float:
    event_times = [s.observed_time for s in subjects if s.event_type != 0]
    if not event_times:
        return max(s.observed_time for s in subjects)
    return float(max(event_times))


def load_dataset(
    subjects_file,
    longitudinal_file,
    schema: dict | None = None,
) -> Dataset:
    """Read a cohort from the two flat files.

    schema keys (all optional): id, time, event, covariates (list of
    column names; default = every remaining subjects column), biomarkers
    (ordered list; default = sorted distinct values of the biomarker
    column), n_event_types, tau_max.
    """
    schema = dict(schema or {})
    id_col = schema.get("id", "id")
    time_col = schema.get("time", "time")
    event_col = schema.get("event", "event")

    subj = pd.read_csv(subjects_file, encoding="utf-8")
    long = pd.read_csv(longitudinal_file, encoding="utf-8")
    for col in (id_col, time_col, event_col):
        if col not in subj.columns:
            raise SchemaError(f"subjects file missing column {col!r}")
    for col in ("id", "biomarker", "time", "value"):
        if col not in long.columns:
            raise SchemaError(f"longitudinal file missing column {col!r}")

    covariate_names = schema.get("covariates")
    if covariate_names is None:
        covariate_names = [c for c in subj.columns if c not in (id_col, time_col, event_col)]
    covariate_names = list(covariate_names)
    missing = [c for c in covariate_names if c not in subj.columns]
    if missing:
        raise SchemaError(f"subjects file missing covariate columns {missing}")

    subj[id_col] = subj[id_col].astype(str)
    long["id"] = long["id"].astype(str)
    if subj[id_col].duplicated().any():
        raise SchemaError("duplicate subject ids in subjects file")

    biomarker_names = schema.get("biomarkers")
    if biomarker_names is None:
        biomarker_names = sorted(long["biomarker"].astype(str).unique())
    biomarker_names = [str(b) for b in biomarker_names]
    biom_index = {b: m for m, b in enumerate(biomarker_names)}

    events = subj[event_col].to_numpy()
    if not np.all(events == events.astype(int)):
        raise EventTypeOutOfRange("event column must hold integers")
    events = events.astype(int)
    if np.any(events < 0):
        raise EventTypeOutOfRange("negative event type")
    n_event_types = int(schema.get("n_event_types") or max(1, events.max()))
    if events.max() > n_event_types:
        raise EventTypeOutOfRange(
            f"event type {events.max()} exceeds n_event_types={n_event_types}"
        )

    known_ids = set(subj[id_col])
    unknown = set(long["id"]) - known_ids
    if unknown:
        raise MissingSubject(f"longitudinal rows reference unknown subjects: {sorted(unknown)[:5]}")

    long = long.copy()
    unknown_bio = set(long["biomarker"].astype(str)) - set(biomarker_names)
    if unknown_bio:
        raise SchemaError(f"unknown biomarkers in longitudinal file: {sorted(unknown_bio)}")
    t_raw = long["time"].astype(float)
    if np.any(t_raw < 0):
        raise NonPositiveTime("negative measurement time")
    long["time"] = np.where(t_raw == 0.0, T_ZERO_SHIFT, t_raw)

    dup = long.duplicated(subset=["id", "biomarker", "time"])
    if dup.any():
        bad = long[dup].iloc[0]
        raise DuplicateMeasurement(
            f"duplicate measurement: subject {bad['id']} biomarker {bad['biomarker']} t={bad['time']}"
        )

    grouped: dict[str, list[tuple[list, list]]] = {
        sid: [([], []) for _ in biomarker_names] for sid in subj[id_col]
    }
    long = long.sort_values(["id", "biomarker", "time"], kind="mergesort")
    for sid, b, t, v in zip(
        long["id"], long["biomarker"].astype(str), long["time"], long["value"].astype(float)
    ):
        tt, vv = grouped[sid][biom_index[b]]
        tt.append(float(t))
        vv.append(float(v))

    subjects = []
    for row in subj.itertuples(index=False):
        rowd = dict(zip(subj.columns, row))
        sid = rowd[id_col]
        meas = tuple(
            (np.array(tt, dtype=float), np.array(vv, dtype=float)) for tt, vv in grouped[sid]
        )
        subjects.append(
            Subject(
                id=sid,
                covariates=np.array([float(rowd[c]) for c in covariate_names]),
                observed_time=float(rowd[time_col]),
                event_type=int(rowd[event_col]),
                measurements=meas,
            )
        )

    tau_max = schema.get("tau_max")
    auto_tau = default_tau_max(subjects)
    if tau_max is None:
        tau_max = auto_tau
    else:
        tau_max = float(tau_max)
        if tau_max < auto_tau - 1e-12:
            raise SchemaError(
                f"tau_max={tau_max} is below the largest observed event time {auto_tau}"
            )
    return Dataset(
        subjects=tuple(subjects),
        n_event_types=n_event_types,
        n_biomarkers=len(biomarker_names),
        covariate_names=tuple(covariate_names),
        biomarker_names=tuple(biomarker_names),
        tau_max=float(tau_max),
    )


def split_lts(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition subject indices into (non_lts, lts, censored_before_tau).

    Long-term survivors are the subjects observed beyond tau_max
    regardless of event status.  A subject censored exactly at tau_max
    also counts: their true event time provably exceeds tau_max (the
    administrative-censoring design censors event-free subjects at
    tau_max itself).  The remaining subjects split by whether their event
    was observed.
    """
    tau = dataset.tau_max
    non_lts, lts, cens = [], [], []
    for i, s in enumerate(dataset.subjects):
        if s.observed_time > tau or (s.event_type == 0 and s.observed_time >= tau - 1e-12):
            lts.append(i)
        elif s.event_type != 0:
            non_lts.append(i)
        else:
            cens.append(i)
    return (
        np.array(non_lts, dtype=int),
        np.array(lts, dtype=int),
        np.array(cens, dtype=int),
    )


def export_dataset(dataset: Dataset, subjects_file, longitudinal_file) -> None:
    """Write the cohort back to the two flat files (CLI round-trip path)."""
    subj_rows = []
    for s in dataset.subjects:
        row = {"id": s.id, "time": s.observed_time, "event": s.event_type}
        row.update(dict(zip(dataset.covariate_names, s.covariates)))
        subj_rows.append(row)
    pd.DataFrame(subj_rows).to_csv(subjects_file, index=False)

    long_rows = []
    for s in dataset.subjects:
        for m, (times, values) in enumerate(s.measurements):
            name = dataset.biomarker_names[m]
            for t, v in zip(times, values):
                long_rows.append({"id": s.id, "biomarker": name, "time": t, "value": v})
    pd.DataFrame(long_rows, columns=["id", "biomarker", "time", "value"]).to_csv(
        longitudinal_file, index=False
    )
