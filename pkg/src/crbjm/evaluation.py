"""Prediction-accuracy measures and the cross-validation protocol.

Competing-risk discrimination and calibration use the time-dependent AUC
and Brier score with inverse-probability-of-censoring weights from a
marginal Kaplan-Meier estimate of the censoring distribution.  Subjects
failing from competing causes inside the prediction window count as
controls for the type being scored; subjects censored inside the window
get weight zero, their mass being carried by the IPCW reweighting.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .data import Dataset, history_from_subject
from .errors import (
    FoldFitFailure,
    NoCases,
    NoComparableSubjects,
    NoControls,
)

_WIN_TOL = 1e-9


class KaplanMeier:
    """Marginal Kaplan-Meier survival estimate with left limits."""

    def __init__(self, times, events):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=int)
        order = np.argsort(times, kind="mergesort")
        t_sorted, e_sorted = times[order], events[order]
        uniq = np.unique(t_sorted[e_sorted == 1])
        surv = []
        current = 1.0
        n = len(t_sorted)
        for t in uniq:
            at_risk = np.sum(t_sorted >= t - _WIN_TOL)
            d = np.sum((np.abs(t_sorted - t) <= _WIN_TOL) & (e_sorted == 1))
            current *= 1.0 - d / at_risk
            surv.append(current)
        self.jump_times = uniq
        self.surv_values = np.array(surv)
        self.n = n

    def survival(self, t: float) -> float:
        idx = np.searchsorted(self.jump_times, t + _WIN_TOL) - 1
        return float(self.surv_values[idx]) if idx >= 0 else 1.0

    def survival_left(self, t: float) -> float:
        idx = np.searchsorted(self.jump_times, t - _WIN_TOL) - 1
        return float(self.surv_values[idx]) if idx >= 0 else 1.0


@dataclass(frozen=True)
class ScoredCohort:
    """Predictions and outcomes for at-risk subjects at one landmark."""

    s: float
    delta: float
    ids: tuple
    times: np.ndarray            # observed exit times
    events: np.ndarray           # observed event types (0 = censored)
    risks: np.ndarray            # (n, J) predicted type risks over (s, s+delta]
    predicted_values: np.ndarray  # (n, M) predicted biomarker values at s+delta
    measurements: tuple           # per subject: per biomarker (times, values)

    def __post_init__(self):
        if np.any(self.times <= self.s + _WIN_TOL):
            raise ValueError("scored subjects must be at risk at s")

    @property
    def n(self) -> int:
        return len(self.ids)


def _censoring_weights(scored: ScoredCohort):
    """IPCW weights: events in the window by observed exit, survivors at s+delta.

    Censored-in-window subjects get weight zero.  The censoring model is a
    marginal Kaplan-Meier fit on the at-risk set, so weights condition on
    being uncensored at s by construction.
    """
    km = KaplanMeier(scored.times, (scored.events == 0).astype(int))
    end = scored.s + scored.delta
    w = np.zeros(scored.n)
    in_window = (scored.times <= end + _WIN_TOL)
    events_in = in_window & (scored.events != 0)
    survivors = scored.times > end + _WIN_TOL
    for i in np.nonzero(events_in)[0]:
        g = km.survival_left(scored.times[i])
        w[i] = 1.0 / g if g > 0 else 0.0
    g_end = km.survival(end)
    if np.any(survivors):
        w[survivors] = 1.0 / g_end if g_end > 0 else 0.0
    return w, events_in, survivors


def td_auc_cr(scored: ScoredCohort, j: int) -> float:
    """Time-dependent competing-risk AUC with IPCW weights; ties count half."""
    w, events_in, survivors = _censoring_weights(scored)
    cases = events_in & (scored.events == j)
    controls = survivors | (events_in & (scored.events != j) & (scored.events != 0))
    if not np.any(cases):
        raise NoCases(f"no type-{j} events in ({scored.s}, {scored.s + scored.delta}]")
    if not np.any(controls):
        raise NoControls("no controls beyond the horizon")
    p = scored.risks[:, j - 1]
    wc = w[cases]
    wl = w[controls]
    pc = p[cases]
    pl = p[controls]
    gt = (pc[:, None] > pl[None, :]).astype(float)
    eq = (pc[:, None] == pl[None, :]).astype(float)
    num = float((wc[:, None] * wl[None, :] * (gt + 0.5 * eq)).sum())
    den = float((wc[:, None] * wl[None, :]).sum())
    return num / den


def brier_cr(scored: ScoredCohort, j: int) -> float:
    """Time-dependent competing-risk Brier score (lower is better).

    Unlike the AUC this is well defined with zero cases (a perfect score
    of 0 is attainable by the constant-zero prediction).
    """
    w, events_in, survivors = _censoring_weights(scored)
    if not np.any(w > 0):
        raise NoControls("every subject is censored inside the window")
    outcome = (events_in & (scored.events == j)).astype(float)
    p = scored.risks[:, j - 1]
    used = w > 0
    return float(np.sum(w[used] * (outcome[used] - p[used]) ** 2) / np.sum(w[used]))


def biomarker_accuracy(scored: ScoredCohort, m: int) -> tuple[float, float, float]:
    """(rmse, p30, p50) of predicted versus observed biomarker at the horizon.

    The observed value is the measurement at the horizon or the closest one
    before it (within the window); subjects without a window measurement,
    without a prediction, or with a terminal event before the comparison
    time are excluded.
    """
    end = scored.s + scored.delta
    preds, obs = [], []
    for i in range(scored.n):
        t_m, v_m = scored.measurements[i][m]
        mask = (t_m > scored.s + _WIN_TOL) & (t_m <= end + _WIN_TOL)
        if not np.any(mask):
            continue
        t_comp = t_m[mask][-1]
        if scored.events[i] != 0 and scored.times[i] < t_comp - _WIN_TOL:
            continue
        pred = scored.predicted_values[i, m]
        if not np.isfinite(pred):
            continue
        preds.append(pred)
        obs.append(v_m[mask][-1])
    if not preds:
        raise NoComparableSubjects(f"no comparable subjects for biomarker {m}")
    preds = np.array(preds)
    obs = np.array(obs)
    err = preds - obs
    rmse = float(np.sqrt(np.mean(err ** 2)))
    p30 = float(np.mean(np.abs(err) <= 0.3 * np.abs(obs) + _WIN_TOL))
    p50 = float(np.mean(np.abs(err) <= 0.5 * np.abs(obs) + _WIN_TOL))
    return rmse, p30, p50


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def stratified_folds(dataset: Dataset, k: int, seed: int) -> np.ndarray:
    """Fold assignment per subject, stratified by observed event type."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 271_828)))
    assign = np.zeros(dataset.n, dtype=int)
    events = np.array([s.event_type for s in dataset.subjects])
    for stratum in np.unique(events):
        idx = np.nonzero(events == stratum)[0]
        perm = rng.permutation(idx)
        assign[perm] = np.arange(len(perm)) % k
    return assign


def score_fold(model, dataset: Dataset, test_idx, landmarks, delta: float):
    """Score held-out subjects at each landmark; returns ScoredCohorts by s."""
    from .prediction import PredictionContext

    out = {}
    M = dataset.n_biomarkers
    J = dataset.n_event_types
    for s in landmarks:
        ids, times, events, risks, preds, meas = [], [], [], [], [], []
        for i in test_idx:
            subj = dataset.subjects[i]
            if subj.observed_time <= s + _WIN_TOL:
                continue
            hist = history_from_subject(subj, s)
            row_risk = np.full(J, np.nan)
            row_pred = np.full(M, np.nan)
            try:
                ctx = PredictionContext(model, hist)
                row_risk = ctx.risk(delta).risks
                for m in range(M):
                    log_w, means, _ = ctx._forecast_components(m, s + delta)
                    w = np.exp(log_w - log_w.max())
                    row_pred[m] = float((w @ means) / w.sum())
            except Exception:
                pass
            ids.append(subj.id)
            times.append(subj.observed_time)
            events.append(subj.event_type)
            risks.append(row_risk)
            preds.append(row_pred)
            meas.append(subj.measurements)
        if ids:
            out[float(s)] = ScoredCohort(
                s=float(s), delta=float(delta), ids=tuple(ids),
                times=np.array(times), events=np.array(events),
                risks=np.vstack(risks), predicted_values=np.vstack(preds),
                measurements=tuple(meas),
            )
    return out


def _merge_scored(parts: list[ScoredCohort]) -> ScoredCohort:
    first = parts[0]
    return ScoredCohort(
        s=first.s, delta=first.delta,
        ids=tuple(x for p in parts for x in p.ids),
        times=np.concatenate([p.times for p in parts]),
        events=np.concatenate([p.events for p in parts]),
        risks=np.vstack([p.risks for p in parts]),
        predicted_values=np.vstack([p.predicted_values for p in parts]),
        measurements=tuple(x for p in parts for x in p.measurements),
    )


def kfold_cv(
    dataset: Dataset,
    spec=None,
    k: int = 5,
    landmarks=(1.0, 2.0, 3.0, 4.0),
    delta: float = 3.0,
    seed: int = 0,
    **fit_kwargs,
) -> tuple[pd.DataFrame, dict]:
    """Subject-level stratified k-fold cross-validation.

    Per fold the model is fitted on the remaining folds and the held-out
    subjects are scored at every landmark.  Emits an accuracy table in the
    metric x target x landmark layout plus a details dict.  A single fold
    failure is tolerated and reported; more than one aborts.
    """
    from .estimation import fit_crbjm

    if k < 2:
        raise ValueError("need k >= 2")
    assign = stratified_folds(dataset, k, seed)
    per_landmark: dict[float, list[ScoredCohort]] = {float(s): [] for s in landmarks}
    fold_failures = []
    fit_logs = []
    for fold in range(k):
        test_idx = np.nonzero(assign == fold)[0]
        train_subjects = tuple(dataset.subjects[i] for i in np.nonzero(assign != fold)[0])
        train = replace(dataset, subjects=train_subjects)
        try:
            model = fit_crbjm(train, spec=spec, **fit_kwargs)
            fit_logs.append({"fold": fold, **model.provenance})
        except Exception as exc:
            fold_failures.append((fold, repr(exc)))
            if len(fold_failures) > 1:
                raise FoldFitFailure(f"folds failed: {fold_failures}") from exc
            continue
        scored = score_fold(model, dataset, test_idx, landmarks, delta)
        for s, part in scored.items():
            per_landmark[s].append(part)

    J, M = dataset.n_event_types, dataset.n_biomarkers
    rows = {}

    def _row(metric, target):
        key = (metric, target)
        if key not in rows:
            rows[key] = {"metric": metric, "target": target}
        return rows[key]

    for s in landmarks:
        col = f"year{s:g}"
        parts = per_landmark[float(s)]
        if not parts:
            continue
        scored = _merge_scored(parts)
        ok = np.all(np.isfinite(scored.risks), axis=1)
        scored_ok = ScoredCohort(
            s=scored.s, delta=scored.delta,
            ids=tuple(np.array(scored.ids, dtype=object)[ok]),
            times=scored.times[ok], events=scored.events[ok],
            risks=scored.risks[ok], predicted_values=scored.predicted_values[ok],
            measurements=tuple(m for m, keep in zip(scored.measurements, ok) if keep),
        )
        for j in range(1, J + 1):
            target = f"type{j}"
            try:
                _row("auc", target)[col] = td_auc_cr(scored_ok, j)
            except (NoCases, NoControls):
                _row("auc", target)[col] = np.nan
            try:
                _row("bs", target)[col] = brier_cr(scored_ok, j)
            except (NoCases, NoControls):
                _row("bs", target)[col] = np.nan
        for m in range(M):
            target = dataset.biomarker_names[m]
            try:
                rmse, p30, p50 = biomarker_accuracy(scored_ok, m)
            except NoComparableSubjects:
                rmse = p30 = p50 = np.nan
            _row("rmse", target)[col] = rmse
            _row("p30", target)[col] = p30
            _row("p50", target)[col] = p50

    report = pd.DataFrame(list(rows.values()))
    details = {
        "k": k,
        "landmarks": list(landmarks),
        "delta": delta,
        "fold_failures": fold_failures,
        "fit_logs": fit_logs,
        "scored": {s: _merge_scored(v) for s, v in per_landmark.items() if v},
    }
    return report, details
