"""Dynamic predictions for a subject at risk at a landmark time s.

Event-type risks over a horizon and the conditional distribution of a
future biomarker value are both ratios of history-weighted survival
integrals.  The integrals are discretized on the shared midpoint-mass
grid; one denominator per (history, s) is computed and reused exactly
across event types, horizon grids, and forecasts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special
from scipy.special import logsumexp, ndtr

from .data import Dataset, History
from .errors import (
    EmptyDenominator,
    GridTooNarrow,
    HorizonBeyondTau,
    MissingCurrentValue,
)
from .estimation import CrBjmModel
from .longitudinal import (
    build_design,
    design_parts,
    random_effect_design,
    stack_measurements,
    subject_covariance,
)
from .numerics import _LOG_2PI, TP, build_grid, chol_psd
from .survival import WeibullFit, fit_weibull_raw

_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class RiskPrediction:
    s: float
    delta: float
    risks: np.ndarray      # per event type j = 1..J
    remainder: float       # P(T > s + delta | history, at risk at s)


@dataclass(frozen=True)
class BiomarkerForecast:
    biomarker: int
    time: float
    grid: np.ndarray
    density: np.ndarray
    mean: float
    mode: float
    quantiles: dict


@dataclass(frozen=True)
class StateOccupancy:
    times: np.ndarray
    cut_points: np.ndarray
    range_probs: np.ndarray   # (len(times), len(cut_points) + 1)
    event_probs: np.ndarray   # (len(times), J)


class PredictionContext:
    """Shared per-(model, history) computation.

    Holds the quadrature grid from s, log cell masses, and the quadratic
    form scalars that make the history log-likelihood a polynomial in
    phi(u) per event type.  The denominator over the full grid is computed
    once and reused by every downstream query.
    """

    def __init__(self, model: CrBjmModel, history: History):
        self.model = model
        self.history = history
        spec = model.spec
        self.J = spec.n_event_types
        self.s = float(history.prediction_time)
        self.V = history.covariates
        self.grid = build_grid(self.s, model.tau_max, model.effective_prediction_width,
                               model.variant, model.t_end_ex)
        n_nontail = self.grid.n_intervals - (1 if self.grid.has_tail else 0)
        self.lowers = self.grid.lowers[:n_nontail]
        self.uppers = self.grid.uppers[:n_nontail]
        self.mids = self.grid.midpoints[:n_nontail]
        self.log_mass, self.log_tail = model.survival.log_cell_masses(self.grid, self.V)

        fit = model.longitudinal
        times, biom, values = stack_measurements(history.measurements)
        self.has_meas = times.size > 0
        self.lts_loglik = 0.0
        if self.has_meas:
            cov = subject_covariance(spec, fit.omega, fit.sigma2, times, biom)
            self.chol = chol_psd(cov)
            self.const = times.size * _LOG_2PI + 2.0 * float(np.sum(np.log(np.diag(self.chol))))
            self.wy = scipy.linalg.solve_triangular(self.chol, values, lower=True)
            X0, X1 = design_parts(spec, times, biom, self.V)
            self.w0 = [scipy.linalg.solve_triangular(self.chol, X0[j] @ fit.coef, lower=True)
                       for j in range(self.J)]
            self.w1 = [scipy.linalg.solve_triangular(self.chol, X1[j] @ fit.coef, lower=True)
                       for j in range(self.J)]
            self.q0 = np.array([(self.wy - w) @ (self.wy - w) for w in self.w0])
            self.q1 = np.array([(self.wy - a) @ b for a, b in zip(self.w0, self.w1)])
            self.q2 = np.array([b @ b for b in self.w1])
            self.hist_Z = random_effect_design(spec, times, biom)
            if model.variant == TP and fit.lts is not None:
                cov_e = subject_covariance(spec, fit.lts.omega, fit.lts.sigma2, times, biom)
                self.chol_e = chol_psd(cov_e)
                Xe, _ = build_design(spec, times, biom, self.V, lts=True)
                we = scipy.linalg.solve_triangular(self.chol_e, values - Xe @ fit.lts.coef,
                                                   lower=True)
                const_e = times.size * _LOG_2PI + 2.0 * float(
                    np.sum(np.log(np.diag(self.chol_e))))
                self.lts_loglik = -0.5 * (const_e + we @ we)
        else:
            self.q0 = np.zeros(self.J)
            self.q1 = np.zeros(self.J)
            self.q2 = np.zeros(self.J)
            self.const = 0.0

        self.cell_logterms = self._logliks(self.mids) + self.log_mass
        tail_term = (self.lts_loglik + self.log_tail) if self.grid.has_tail else -np.inf
        self.tail_logterm = tail_term
        allterms = np.append(self.cell_logterms.ravel(), tail_term)
        self.log_denominator = float(logsumexp(allterms))
        if not np.isfinite(self.log_denominator):
            raise EmptyDenominator("no probability mass beyond the landmark time")

    def _logliks(self, u) -> np.ndarray:
        """History log-likelihood at event times u, all types; (len(u), J)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not self.has_meas or u.size == 0:
            return np.zeros((u.size, self.J))
        phi = self.model.spec.phi_of(u)[:, None]
        return -0.5 * (self.const + self.q0[None, :] - 2.0 * phi * self.q1[None, :]
                       + (phi ** 2) * self.q2[None, :])

    def _segment_logterms(self, a: float, b: float) -> np.ndarray:
        """Log of history-weighted mass over an arbitrary interval [a, b)."""
        surv = self.model.survival
        ls_a = float(surv.log_survival(a, self.V))
        ls_b = float(surv.log_survival(b, self.V))
        diff = min(ls_b - ls_a, 0.0)
        with np.errstate(divide="ignore"):
            log_m = ls_a + np.log(-np.expm1(diff)) if diff < 0 else -np.inf
        mid = 0.5 * (a + b)
        return self._logliks([mid])[0] + surv.log_type_probs(mid, self.V)[0] + log_m

    def _split_at(self, c: float):
        """Full cells below c, plus an optional partial segment [a, c)."""
        full = np.nonzero(self.uppers <= c + _EDGE_TOL)[0]
        partial = None
        idx = np.nonzero((self.lowers < c - _EDGE_TOL) & (self.uppers > c + _EDGE_TOL))[0]
        if idx.size:
            k = int(idx[0])
            partial = (float(self.lowers[k]), c, k)
        return full, partial

    def risk(self, delta: float) -> RiskPrediction:
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        c = self.s + delta
        if self.model.variant == TP and c >= self.model.tau_max - _EDGE_TOL:
            raise HorizonBeyondTau(
                f"s + delta = {c} reaches tau_max = {self.model.tau_max}; "
                "two-part predictions require s + delta < tau_max"
            )
        full, partial = self._split_at(c)
        log_num = np.full(self.J, -np.inf)
        below = [self.cell_logterms[full]] if full.size else []
        if partial is not None:
            below.append(self._segment_logterms(partial[0], partial[1])[None, :])
        if below:
            log_num = logsumexp(np.vstack(below), axis=0)
        risks = np.exp(log_num - self.log_denominator)

        # remainder from the complement cells, for an honest simplex check
        above = [self.cell_logterms[self.lowers >= c - _EDGE_TOL]]
        if partial is not None:
            above.append(self._segment_logterms(partial[1], float(self.uppers[partial[2]]))[None, :])
        rem_terms = np.append(np.vstack(above).ravel(), self.tail_logterm)
        remainder = float(np.exp(logsumexp(rem_terms) - self.log_denominator))
        return RiskPrediction(s=self.s, delta=float(delta), risks=risks, remainder=remainder)

    def cif_curve(self, deltas) -> np.ndarray:
        return np.vstack([self.risk(float(d)).risks for d in np.asarray(deltas, dtype=float)])

    # -- future biomarker -------------------------------------------------

    def _forecast_components(self, m: int, t: float):
        """Mixture components of Y_m(t): per-(cell, type) Gaussians plus LTS.

        Returns (log_weights, means, variances); weights are unnormalized,
        their logsumexp is the forecast denominator at t.
        """
        model, spec, fit = self.model, self.model.spec, self.model.longitudinal
        t_row = np.array([t])
        b_row = np.array([m])
        z_row = random_effect_design(spec, t_row, b_row)[0]
        X0r, X1r = design_parts(spec, t_row, b_row, self.V)
        prior_var = float(z_row @ fit.omega @ z_row) + float(fit.sigma2[m])
        if self.has_meas:
            k = self.hist_Z @ (fit.omega @ z_row)
            wk = scipy.linalg.solve_triangular(self.chol, k, lower=True)
            cond_var = prior_var - float(wk @ wk)
        else:
            cond_var = prior_var

        log_w, means = [], []
        cells = np.nonzero(self.uppers > t + _EDGE_TOL)[0]
        for kdx in cells:
            a = max(float(self.lowers[kdx]), t)
            b = float(self.uppers[kdx])
            if a > float(self.lowers[kdx]) + _EDGE_TOL:
                seg = self._segment_logterms(a, b)
                u_mid = 0.5 * (a + b)
            else:
                seg = self.cell_logterms[kdx]
                u_mid = float(self.mids[kdx])
            phi = float(spec.phi_of(u_mid))
            for j in range(self.J):
                mu = float((X0r[j][0] + phi * X1r[j][0]) @ fit.coef)
                if self.has_meas:
                    mu += float(wk @ (self.wy - self.w0[j] - phi * self.w1[j]))
                log_w.append(float(seg[j]))
                means.append(mu)
        variances = [cond_var] * len(means)

        if model.variant == TP and self.grid.has_tail:
            lts = fit.lts
            ze = z_row
            prior_var_e = float(ze @ lts.omega @ ze) + float(lts.sigma2[m])
            Xe_row, _ = build_design(spec, t_row, b_row, self.V, lts=True)
            mu_e = float(Xe_row[0] @ lts.coef)
            if self.has_meas:
                ke = self.hist_Z @ (lts.omega @ ze)
                wke = scipy.linalg.solve_triangular(self.chol_e, ke, lower=True)
                times, biom, values = stack_measurements(self.history.measurements)
                Xe_hist, _ = build_design(spec, times, biom, self.V, lts=True)
                we = scipy.linalg.solve_triangular(
                    self.chol_e, values - Xe_hist @ lts.coef, lower=True)
                mu_e += float(wke @ we)
                var_e = prior_var_e - float(wke @ wke)
            else:
                var_e = prior_var_e
            log_w.append(self.tail_logterm)
            means.append(mu_e)
            variances.append(var_e)
        return np.array(log_w), np.array(means), np.array(variances)

    def forecast(self, m: int, t: float, value_grid=None, n_points: int = 513,
                 n_sd: float = 6.0) -> BiomarkerForecast:
        if t <= self.s:
            raise ValueError("forecast time must exceed the prediction time s")
        log_w, means, variances = self._forecast_components(m, t)
        log_norm = float(logsumexp(log_w))
        if not np.isfinite(log_norm):
            raise EmptyDenominator(f"no survival mass beyond t = {t}")
        w = np.exp(log_w - log_norm)
        sds = np.sqrt(np.maximum(variances, 1e-12))
        mix_mean = float(w @ means)
        mix_var = float(w @ (variances + means ** 2) - mix_mean ** 2)
        mix_sd = float(np.sqrt(max(mix_var, 1e-12)))
        if value_grid is not None:
            lo, hi, n_points = value_grid
        else:
            lo, hi = mix_mean - n_sd * mix_sd, mix_mean + n_sd * mix_sd
        grid = np.linspace(lo, hi, int(n_points))

        outside = float(w @ (ndtr((lo - means) / sds) + ndtr((means - hi) / sds)))
        if outside > 1e-4:
            raise GridTooNarrow(f"{outside:.2e} of the forecast mass falls outside the grid")

        zz = (grid[:, None] - means[None, :]) / sds[None, :]
        dens = (np.exp(-0.5 * zz ** 2) / (np.sqrt(2 * np.pi) * sds[None, :])) @ w

        dx = grid[1] - grid[0]
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
        total = cdf[-1]
        mean = float(np.trapezoid(grid * dens, grid) / total)
        quantiles = {}
        for p in np.arange(0.1, 0.95, 0.1):
            quantiles[round(float(p), 1)] = float(np.interp(p * total, cdf, grid))
        i = int(np.argmax(dens))
        mode = float(grid[i])
        if 0 < i < len(grid) - 1:
            denom = dens[i - 1] - 2 * dens[i] + dens[i + 1]
            if denom < 0:
                mode = float(grid[i] + 0.5 * dx * (dens[i - 1] - dens[i + 1]) / denom)
        return BiomarkerForecast(biomarker=m, time=float(t), grid=grid, density=dens,
                                 mean=mean, mode=mode, quantiles=quantiles)

    def range_probabilities(self, m: int, t: float, cut_points) -> np.ndarray:
        """P(Y_m(t) in range, T > t | history, at risk at s) per range.

        Normalized by the denominator at s so the ranges plus the event
        occupancies sum to one.
        """
        if t <= self.s + _EDGE_TOL:
            # at t = s every grid cell lies ahead
            log_w, comp_means, comp_vars = self._forecast_components_at_s(m)
        else:
            log_w, comp_means, comp_vars = self._forecast_components(m, t)
        w = np.exp(log_w - self.log_denominator)
        sds = np.sqrt(np.maximum(comp_vars, 1e-12))
        edges = np.concatenate([[-np.inf], np.asarray(cut_points, dtype=float), [np.inf]])
        probs = np.zeros(len(edges) - 1)
        for r in range(len(edges) - 1):
            lo, hi = edges[r], edges[r + 1]
            p_lo = ndtr((lo - comp_means) / sds) if np.isfinite(lo) else np.zeros_like(comp_means)
            p_hi = ndtr((hi - comp_means) / sds) if np.isfinite(hi) else np.ones_like(comp_means)
            probs[r] = float(w @ (p_hi - p_lo))
        return probs

    def _forecast_components_at_s(self, m: int):
        # like _forecast_components but includes every cell (t = s boundary)
        model, spec, fit = self.model, self.model.spec, self.model.longitudinal
        t_row = np.array([max(self.s, 1e-9)])
        b_row = np.array([m])
        z_row = random_effect_design(spec, t_row, b_row)[0]
        X0r, X1r = design_parts(spec, t_row, b_row, self.V)
        prior_var = float(z_row @ fit.omega @ z_row) + float(fit.sigma2[m])
        if self.has_meas:
            k = self.hist_Z @ (fit.omega @ z_row)
            wk = scipy.linalg.solve_triangular(self.chol, k, lower=True)
            cond_var = prior_var - float(wk @ wk)
        else:
            cond_var = prior_var
        log_w, means = [], []
        for kdx in range(len(self.mids)):
            phi = float(spec.phi_of(float(self.mids[kdx])))
            for j in range(self.J):
                mu = float((X0r[j][0] + phi * X1r[j][0]) @ fit.coef)
                if self.has_meas:
                    mu += float(wk @ (self.wy - self.w0[j] - phi * self.w1[j]))
                log_w.append(float(self.cell_logterms[kdx, j]))
                means.append(mu)
        variances = [cond_var] * len(means)
        if model.variant == TP and self.grid.has_tail:
            lts = fit.lts
            prior_var_e = float(z_row @ lts.omega @ z_row) + float(lts.sigma2[m])
            Xe_row, _ = build_design(spec, t_row, b_row, self.V, lts=True)
            mu_e = float(Xe_row[0] @ lts.coef)
            if self.has_meas:
                ke = self.hist_Z @ (lts.omega @ z_row)
                wke = scipy.linalg.solve_triangular(self.chol_e, ke, lower=True)
                times, biom, values = stack_measurements(self.history.measurements)
                Xe_hist, _ = build_design(spec, times, biom, self.V, lts=True)
                we = scipy.linalg.solve_triangular(
                    self.chol_e, values - Xe_hist @ lts.coef, lower=True)
                mu_e += float(wke @ we)
                var_e = prior_var_e - float(wke @ wke)
            else:
                var_e = prior_var_e
            log_w.append(self.tail_logterm)
            means.append(mu_e)
            variances.append(var_e)
        return np.array(log_w), np.array(means), np.array(variances)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def predict_risk(model: CrBjmModel, history: History, delta: float) -> RiskPrediction:
    """P(s < T <= s + delta, D = j | history, at risk at s) for every type."""
    return PredictionContext(model, history).risk(delta)


def predict_cif_curve(model: CrBjmModel, history: History, deltas) -> np.ndarray:
    """Per-type cumulative incidence over a horizon grid; shares one denominator."""
    return PredictionContext(model, history).cif_curve(deltas)


def predict_biomarker(model: CrBjmModel, history: History, biomarker: int, t: float,
                      value_grid=None) -> BiomarkerForecast:
    """Conditional density of biomarker value at future time t given survival."""
    return PredictionContext(model, history).forecast(biomarker, t, value_grid=value_grid)


def state_occupancy(model: CrBjmModel, history: History, biomarker: int,
                    cut_points, times) -> StateOccupancy:
    """Multistate presentation: biomarker-range states plus event occupancies.

    At each time the range states and the per-type occupancies sum to one
    (both normalized by the denominator at s).
    """
    cut_points = np.asarray(cut_points, dtype=float)
    if cut_points.size and np.any(np.diff(cut_points) <= 0):
        raise ValueError("cut points must be strictly increasing")
    ctx = PredictionContext(model, history)
    times = np.asarray(times, dtype=float)
    if np.any(times < ctx.s - _EDGE_TOL):
        raise ValueError("occupancy times must be at or after s")
    range_probs = np.zeros((times.size, cut_points.size + 1))
    event_probs = np.zeros((times.size, ctx.J))
    for i, t in enumerate(times):
        if t > ctx.s + _EDGE_TOL:
            event_probs[i] = ctx.risk(float(t - ctx.s)).risks
        range_probs[i] = ctx.range_probabilities(biomarker, float(t), cut_points)
    return StateOccupancy(times=times, cut_points=cut_points,
                          range_probs=range_probs, event_probs=event_probs)


# ---------------------------------------------------------------------------
# Static prediction model (baseline-regression comparator)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaticModel:
    """Weibull regression on baseline covariates plus baseline biomarker values."""

    weibull: WeibullFit
    n_covariates: int
    n_biomarkers: int


def fit_static_model(dataset: Dataset) -> StaticModel:
    """Train the static comparator on (V, first biomarker values)."""
    rows, times, delta = [], [], []
    for s in dataset.subjects:
        vals = []
        ok = True
        for t, v in s.measurements:
            if t.size == 0:
                ok = False
                break
            vals.append(v[0])
        if not ok:
            continue
        rows.append(np.concatenate([s.covariates, vals]))
        times.append(s.observed_time)
        delta.append(1.0 if s.event_type != 0 else 0.0)
    wb = fit_weibull_raw(np.array(times), np.array(delta), np.vstack(rows))
    return StaticModel(weibull=wb, n_covariates=len(dataset.covariate_names),
                       n_biomarkers=dataset.n_biomarkers)


def predict_static(spm: StaticModel, history: History, delta: float) -> float:
    """P(T - s > delta | T > s) with time-s biomarker values as covariates."""
    s = history.prediction_time
    current = []
    for m, (t, v) in enumerate(history.measurements):
        if t.size == 0:
            raise MissingCurrentValue(f"no measurement at or before s for biomarker {m}")
        current.append(v[-1])
    covs = np.concatenate([history.covariates, current])
    num = float(spm.weibull.survival(s + delta, covs))
    den = float(spm.weibull.survival(s, covs))
    if den <= 0:
        raise EmptyDenominator("static model assigns no mass beyond s")
    return num / den
