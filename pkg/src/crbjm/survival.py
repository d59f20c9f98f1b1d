"""Vertical model for the joint law of event time and event type.

The composite event time follows either a parametric Weibull regression or
a Cox model whose log baseline hazard is linearly extended beyond the last
event time (an exponential tail).  Event types follow a multinomial
regression on a spline expansion of the event time plus the baseline
covariates, with the last type as the reference category.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .data import Dataset
from .errors import (
    AllCensored,
    MissingEventType,
    NoConvergence,
    SeparationWarning,
)
from .numerics import QuadratureGrid, SplineBasis, eval_spline_many, maximize

_COEF_CAP = 30.0


# ---------------------------------------------------------------------------
# Weibull time model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeibullFit:
    """Weibull regression with log-scale linear in covariates.

    scale(V) = exp(eta[0] + eta[1:] @ V); survival S(t|V) = exp(-(t/scale)^k).
    """

    shape: float
    coef: np.ndarray          # eta, intercept first
    coef_se: np.ndarray = field(default=None, repr=False)
    shape_se: float = field(default=None, repr=False)

    def log_scale(self, V) -> float:
        V = np.asarray(V, dtype=float).ravel()
        return float(self.coef[0] + self.coef[1:] @ V)

    def survival(self, u, V):
        return np.exp(self.log_survival(u, V))

    def log_survival(self, u, V):
        u = np.asarray(u, dtype=float)
        lam = np.exp(self.log_scale(V))
        with np.errstate(over="ignore"):
            return -np.power(np.maximum(u, 0.0) / lam, self.shape)

    def density(self, u, V):
        u = np.asarray(u, dtype=float)
        lam = np.exp(self.log_scale(V))
        k = self.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.power(u / lam, k)
            out = np.where(u > 0, (k / lam) * np.power(u / lam, k - 1.0) * np.exp(-z), 0.0)
        return out


def _weibull_objective(times, delta, xmat):
    logt = np.log(times)

    def objective(theta):
        a, eta = theta[0], theta[1:]
        k = np.exp(a)
        mu = xmat @ eta
        w = logt - mu
        z = k * w
        ez = np.exp(np.minimum(z, 500.0))
        ll = float(np.sum(delta * (a + (k - 1.0) * logt - k * mu)) - np.sum(ez))
        g_a = float(np.sum(delta * (1.0 + z) - z * ez))
        g_eta = xmat.T @ (k * (ez - delta))
        grad = np.concatenate([[g_a], g_eta])
        h_aa = float(np.sum(z * delta - z * (1.0 + z) * ez))
        h_ae = xmat.T @ (k * (ez - delta) + k * z * ez)
        we = (k * k) * ez
        h_ee = -(xmat.T * we) @ xmat
        hess = np.zeros((theta.size, theta.size))
        hess[0, 0] = h_aa
        hess[0, 1:] = h_ae
        hess[1:, 0] = h_ae
        hess[1:, 1:] = h_ee
        return ll, grad, hess

    return objective


def fit_weibull_raw(times, delta, covariates) -> WeibullFit:
    """Censored-data Weibull MLE on raw arrays (times, event indicator, V)."""
    times = np.asarray(times, dtype=float)
    delta = np.asarray(delta, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1) if covariates.size == times.size else covariates.reshape(times.size, -1)
    if covariates.size == 0:
        covariates = np.zeros((times.size, 0))
    if delta.sum() < 1:
        raise AllCensored("Weibull fit needs at least one observed event")
    xmat = np.column_stack([np.ones(times.size), covariates])
    init = np.zeros(1 + xmat.shape[1])
    init[1] = np.log(times.sum() / max(delta.sum(), 1.0))
    objective = _weibull_objective(times, delta, xmat)
    theta = maximize(objective, init, tol=1e-8, max_iter=200)
    _, _, hess = objective(theta)
    try:
        se = np.sqrt(np.diag(np.linalg.inv(-hess)))
    except np.linalg.LinAlgError:
        se = np.full(theta.size, np.nan)
    return WeibullFit(
        shape=float(np.exp(theta[0])),
        coef=theta[1:].copy(),
        coef_se=se[1:].copy(),
        shape_se=float(se[0] * np.exp(theta[0])),
    )


def fit_weibull(dataset: Dataset) -> WeibullFit:
    times = np.array([s.observed_time for s in dataset.subjects])
    delta = np.array([1.0 if s.event_type != 0 else 0.0 for s in dataset.subjects])
    return fit_weibull_raw(times, delta, dataset.covariate_matrix())


# ---------------------------------------------------------------------------
# Cox time model with exponential tail
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoxFit:
    """Cox partial-likelihood fit with Breslow baseline.

    The cumulative baseline hazard is interpolated linearly between event
    times so the implied density is proper, and the hazard beyond the last
    event time is the constant tail_rate (times exp(gamma'V)).
    """

    coef: np.ndarray
    baseline_times: np.ndarray    # unique event times, ascending
    baseline_cumhaz: np.ndarray   # Breslow values at baseline_times
    tail_rate: float

    def _cumhaz0(self, u):
        u = np.asarray(u, dtype=float)
        t_last = self.baseline_times[-1]
        lam_last = self.baseline_cumhaz[-1]
        inside = np.interp(np.minimum(u, t_last), np.r_[0.0, self.baseline_times],
                           np.r_[0.0, self.baseline_cumhaz])
        tail = np.where(u > t_last, (u - t_last) * self.tail_rate, 0.0)
        return inside + tail

    def _hazard0(self, u):
        u = np.asarray(u, dtype=float)
        nodes = np.r_[0.0, self.baseline_times]
        vals = np.r_[0.0, self.baseline_cumhaz]
        rates = np.diff(vals) / np.diff(nodes)
        idx = np.clip(np.searchsorted(nodes, u, side="right") - 1, 0, len(rates) - 1)
        out = rates[idx]
        return np.where(u > self.baseline_times[-1], self.tail_rate, out)

    def survival(self, u, V):
        return np.exp(self.log_survival(u, V))

    def log_survival(self, u, V):
        risk = float(np.exp(np.asarray(V, dtype=float).ravel() @ self.coef))
        return -self._cumhaz0(u) * risk

    def density(self, u, V):
        risk = float(np.exp(np.asarray(V, dtype=float).ravel() @ self.coef))
        return self._hazard0(u) * risk * np.exp(-self._cumhaz0(u) * risk)


def _cox_partial_objective(times, delta, covariates):
    order = np.argsort(-times, kind="mergesort")  # descending time
    t_sorted = times[order]
    d_sorted = delta[order]
    x_sorted = covariates[order]

    def objective(gamma):
        eta = x_sorted @ gamma
        w = np.exp(eta)
        s0 = np.cumsum(w)
        s1 = np.cumsum(w[:, None] * x_sorted, axis=0)
        s2 = np.cumsum(w[:, None, None] * (x_sorted[:, :, None] * x_sorted[:, None, :]), axis=0)
        # risk set of time t includes all subjects with time >= t; with the
        # descending sort that's the inclusive prefix, extended over ties
        uniq, inv = np.unique(-t_sorted, return_inverse=True)
        last_idx = np.zeros(len(uniq), dtype=int)
        np.maximum.at(last_idx, inv, np.arange(len(t_sorted)))
        idx = last_idx[inv]
        ll = 0.0
        grad = np.zeros_like(gamma)
        hess = np.zeros((gamma.size, gamma.size))
        ev = d_sorted > 0
        s0e = s0[idx[ev]]
        s1e = s1[idx[ev]]
        s2e = s2[idx[ev]]
        ll = float(np.sum(eta[ev]) - np.sum(np.log(s0e)))
        xbar = s1e / s0e[:, None]
        grad = x_sorted[ev].sum(axis=0) - xbar.sum(axis=0)
        hess = -(s2e / s0e[:, None, None]).sum(axis=0) + np.einsum("ip,iq->pq", xbar, xbar)
        return ll, grad, hess

    return objective


def fit_cox(dataset: Dataset, tail_quartile: float = 0.25) -> CoxFit:
    """Partial-likelihood Cox fit plus Breslow baseline and tail extension.

    The tail rate comes from a least-squares line through the log baseline
    hazard increments over the last quartile of event times, evaluated at
    the last event time.
    """
    times = np.array([s.observed_time for s in dataset.subjects])
    delta = np.array([1.0 if s.event_type != 0 else 0.0 for s in dataset.subjects])
    covs = dataset.covariate_matrix()
    if delta.sum() < 1:
        raise AllCensored("Cox fit needs at least one observed event")
    if covs.shape[1] == 0:
        gamma = np.zeros(0)
    else:
        objective = _cox_partial_objective(times, delta, covs)
        gamma = maximize(objective, np.zeros(covs.shape[1]), tol=1e-8, max_iter=200)

    # Breslow baseline on unique event times
    risk = np.exp(covs @ gamma) if covs.shape[1] else np.ones(times.size)
    ev_times = np.unique(times[delta > 0])
    cumhaz = np.zeros(ev_times.size)
    acc = 0.0
    for k, t in enumerate(ev_times):
        d_k = np.sum((times == t) & (delta > 0))
        at_risk = risk[times >= t].sum()
        acc += d_k / at_risk
        cumhaz[k] = acc

    # hazard-rate regression over the last quartile of event times
    nodes = np.r_[0.0, ev_times]
    vals = np.r_[0.0, cumhaz]
    rates = np.diff(vals) / np.diff(nodes)
    cut = np.quantile(ev_times, 1.0 - tail_quartile)
    sel = ev_times >= cut
    if sel.sum() >= 2:
        tt = ev_times[sel] - ev_times[-1]
        lr = np.log(np.maximum(rates[sel], 1e-300))
        slope, intercept = np.polyfit(tt, lr, 1)
        tail_rate = float(np.exp(intercept))
    else:
        tail_rate = float(rates[-1])
    return CoxFit(coef=gamma, baseline_times=ev_times, baseline_cumhaz=cumhaz,
                  tail_rate=tail_rate)


# ---------------------------------------------------------------------------
# Multinomial event-type model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventTypeFit:
    """Multinomial event-type regression; type J is the reference."""

    basis: SplineBasis
    coef: np.ndarray          # (J-1, basis.dimension + p)
    n_event_types: int
    separation: bool = False

    def _features(self, u):
        return eval_spline_many(self.basis, u)

    def type_probs(self, u, V):
        """P(type = j | event at u, V) for j = 1..J; u may be an array."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        V = np.asarray(V, dtype=float).ravel()
        if self.n_event_types == 1:
            return np.ones((u.size, 1))
        feats = np.column_stack([self._features(u), np.tile(V, (u.size, 1))])
        logits = np.column_stack([feats @ self.coef.T, np.zeros(u.size)])
        logits -= logits.max(axis=1, keepdims=True)
        ex = np.exp(logits)
        return ex / ex.sum(axis=1, keepdims=True)


def _multinomial_objective(y_onehot, feats, ridge=0.0):
    n, d = feats.shape
    jm1 = y_onehot.shape[1]

    def objective(theta_flat):
        theta = theta_flat.reshape(jm1, d)
        logits = np.column_stack([feats @ theta.T, np.zeros(n)])
        shift = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - shift)
        denom = ex.sum(axis=1)
        probs = ex / denom[:, None]
        # reference-class rows contribute -shift - log(denom) with logit 0
        ll = float(np.sum(logits[:, :jm1] * y_onehot) - np.sum(shift) - np.sum(np.log(denom)))
        ll -= 0.5 * ridge * float(theta_flat @ theta_flat)
        resid = y_onehot - probs[:, :jm1]
        grad = (resid.T @ feats).ravel() - ridge * theta_flat
        hess = np.zeros((jm1 * d, jm1 * d))
        for j in range(jm1):
            for l in range(jm1):
                w = probs[:, j] * ((1.0 if j == l else 0.0) - probs[:, l])
                hess[j * d:(j + 1) * d, l * d:(l + 1) * d] = -(feats.T * w) @ feats
        hess -= ridge * np.eye(jm1 * d)
        return ll, grad, hess

    return objective


def fit_event_type(dataset: Dataset, basis: SplineBasis) -> EventTypeFit | None:
    """Fit the event-type model on uncensored subjects.

    Quasi-separation is reported through a SeparationWarning and the fit is
    returned with coefficients capped in norm.  Returns None when J = 1.
    """
    J = dataset.n_event_types
    if J == 1:
        return None
    events = [(s.observed_time, s.event_type, s.covariates) for s in dataset.subjects
              if s.event_type != 0]
    if not events:
        raise AllCensored("event-type fit needs uncensored subjects")
    types = np.array([e[1] for e in events])
    present = set(types.tolist())
    missing = [j for j in range(1, J + 1) if j not in present]
    if missing:
        raise MissingEventType(f"no uncensored subjects of type(s) {missing}")
    times = np.array([e[0] for e in events])
    covs = np.array([e[2] for e in events])
    feats = np.column_stack([eval_spline_many(basis, times), covs])
    y_onehot = np.column_stack([(types == j).astype(float) for j in range(1, J)])

    separation = False
    objective = _multinomial_objective(y_onehot, feats)
    try:
        theta = maximize(objective, np.zeros(feats.shape[1] * (J - 1)), tol=1e-7, max_iter=200)
    except NoConvergence:
        ridge_obj = _multinomial_objective(y_onehot, feats, ridge=1e-4)
        theta = maximize(ridge_obj, np.zeros(feats.shape[1] * (J - 1)), tol=1e-6, max_iter=500)
        separation = True
    if np.max(np.abs(theta)) > _COEF_CAP:
        separation = True
        theta = np.clip(theta, -_COEF_CAP, _COEF_CAP)
    if separation:
        warnings.warn("event-type coefficients capped (quasi-separation)", SeparationWarning)
    return EventTypeFit(basis=basis, coef=theta.reshape(J - 1, feats.shape[1]),
                        n_event_types=J, separation=separation)


# ---------------------------------------------------------------------------
# Combined survival fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalFit:
    """P(event time, event type | V) as time model times type model."""

    time_model: WeibullFit | CoxFit
    event_type_model: EventTypeFit | None
    n_event_types: int

    def survival(self, u, V):
        return self.time_model.survival(u, V)

    def log_survival(self, u, V):
        return self.time_model.log_survival(u, V)

    def time_density(self, u, V):
        return self.time_model.density(u, V)

    def type_probs(self, u, V):
        if self.event_type_model is None:
            u = np.atleast_1d(np.asarray(u, dtype=float))
            return np.ones((u.size, 1))
        return self.event_type_model.type_probs(u, V)

    def log_type_probs(self, u, V):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.event_type_model is None:
            return np.zeros((u.size, 1))
        etm = self.event_type_model
        V = np.asarray(V, dtype=float).ravel()
        feats = np.column_stack([etm._features(u), np.tile(V, (u.size, 1))])
        logits = np.column_stack([feats @ etm.coef.T, np.zeros(u.size)])
        return logits - scipy.special.logsumexp(logits, axis=1, keepdims=True)

    def joint_density(self, u, j, V):
        """f(T=u, D=j | V); j in 1..J."""
        u_arr = np.atleast_1d(np.asarray(u, dtype=float))
        dens = self.time_density(u_arr, V) * self.type_probs(u_arr, V)[:, j - 1]
        return dens if np.ndim(u) else float(dens[0])

    def prob_beyond_tau(self, tau_max, V) -> float:
        return float(self.survival(tau_max, V))

    def interval_mass(self, a: float, b: float, j: int, V) -> float:
        """P(T in [a,b), D=j | V) with the type probability at the midpoint."""
        mass = float(self.survival(a, V) - self.survival(b, V))
        return mass * float(self.type_probs(0.5 * (a + b), V)[0, j - 1])

    def cell_masses(self, grid: QuadratureGrid, V) -> tuple[np.ndarray, float]:
        """Masses (K_nontail, J) for the bounded cells plus the tail mass.

        For a grid without a tail interval the tail mass is 0.
        """
        log_m, log_tail = self.log_cell_masses(grid, V)
        return np.exp(log_m), float(np.exp(log_tail))

    def log_cell_masses(self, grid: QuadratureGrid, V) -> tuple[np.ndarray, float]:
        """Log cell masses; stable deep in the survival tail.

        log P(T in [a,b), D=j | V) = log S(a) + log(1 - S(b)/S(a)) plus the
        log type probability at the cell midpoint.
        """
        edges = grid.edges
        if grid.has_tail:
            bounded = edges[:-1]
            log_tail = float(self.log_survival(bounded[-1], V))
        else:
            bounded = edges
            log_tail = -np.inf
        ls = np.asarray(self.log_survival(bounded, V), dtype=float)
        la, lb = ls[:-1], ls[1:]
        log_m = np.full(la.shape, -np.inf)
        ok = np.isfinite(la)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.minimum(lb[ok] - la[ok], 0.0)
            log_m[ok] = la[ok] + np.log(-np.expm1(d))
        if bounded.size >= 2:
            mids = 0.5 * (bounded[:-1] + bounded[1:])
            log_probs = self.log_type_probs(mids, V)
        else:
            log_probs = np.zeros((0, self.n_event_types))
        return log_m[:, None] + log_probs, log_tail


def fit_survival(
    dataset: Dataset,
    time_model: str = "weibull",
    basis: SplineBasis | None = None,
) -> SurvivalFit:
    """Two-step vertical-model fit: time model then event-type model."""
    if basis is None:
        ev_times = [s.observed_time for s in dataset.subjects if s.event_type != 0]
        if not ev_times:
            raise AllCensored("survival fit needs uncensored subjects")
        basis = SplineBasis.natural_cubic_from_quantiles(ev_times)
    if time_model == "weibull":
        tm = fit_weibull(dataset)
    elif time_model == "cox":
        tm = fit_cox(dataset)
    else:
        raise ValueError(f"unknown time model {time_model!r}")
    etm = fit_event_type(dataset, basis)
    return SurvivalFit(time_model=tm, event_type_model=etm,
                       n_event_types=dataset.n_event_types)
