"""Synthetic cohorts from a known truth, plus independent oracles.

The generator draws the baseline covariate, the event time from a Weibull
regression, the event type from a logistic model in (time, covariate),
an independent censoring time calibrated to the target rates, random
intercepts, and noisy linear trajectories around the conditional mean.
Under the two-part scenario subjects surviving past tau_max follow the
separate long-term-survivor trajectory model.

The oracles evaluate the prediction estimands by dense-grid integration
and by weighted Monte Carlo, assembling the integrands directly from the
parameter values without touching the production quadrature code.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.stats

from .data import Dataset, Subject
from .errors import CalibrationFailure
from .estimation import CrBjmModel, em_fit, fit_cca, parameter_vector
from .longitudinal import LongitudinalFit, LongitudinalSpec, LtsFit, column_names, design_columns
from .numerics import EX, TP, SplineBasis
from .survival import EventTypeFit, SurvivalFit, WeibullFit

CONFIG_VERSION = 1


def _default_traj(m: int) -> dict:
    # magnitudes chosen so every coefficient is well determined at the
    # study sample sizes (percent-bias checks need small relative SDs)
    return {
        "g0": {"const": 8.0 + m, "cov": [1.2], "type": [3.0], "phi": -0.5, "phi_type": [0.6]},
        "g1": {"const": -1.0, "cov": [0.5], "type": [1.0], "phi": -0.15, "phi_type": [0.2]},
    }


def _default_lts_traj(m: int) -> dict:
    return {
        "g0": {"const": 9.0 + m, "cov": [0.4]},
        "g1": {"const": -0.3, "cov": [0.2]},
    }


@dataclass
class GeneratorConfig:
    """True parameter values and sampling plan for one scenario."""

    n: int = 300
    variant: str = EX
    seed: int = 1
    n_biomarkers: int = 3
    n_covariates: int = 1
    n_event_types: int = 2
    weibull_shape: float = 1.5
    weibull_intercept: float = 2.0
    weibull_cov: list = field(default_factory=lambda: [0.5])
    type_intercept: float = -2.0
    type_time: float = 0.3
    type_cov: list = field(default_factory=lambda: [0.5])
    traj: list = None
    omega_diag: float = 1.0
    omega_cross: float = 0.3
    sigma2: float = 0.5
    lts_traj: list = None
    lts_omega_diag: float = 1.2
    lts_omega_cross: float = 0.36
    lts_sigma2: float = 0.7
    tau_max: float = 12.0
    visit_spacing: float = 0.5
    visit_jitter: float = 0.1
    target_censoring: float = 0.40
    target_admin_censoring: float = 0.20
    censor_max: float | None = None
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.traj is None:
            self.traj = [_default_traj(m) for m in range(self.n_biomarkers)]
        if self.lts_traj is None:
            self.lts_traj = [_default_lts_traj(m) for m in range(self.n_biomarkers)]
        if self.variant not in (EX, TP):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_event_types != 2:
            raise ValueError("the generator implements the two-type scenario")

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = copy.deepcopy(dict(d))
        version = d.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported generator config version {version}")
        return GeneratorConfig(**d)

    # -- true model pieces -------------------------------------------------

    def spec(self) -> LongitudinalSpec:
        return LongitudinalSpec(
            n_biomarkers=self.n_biomarkers,
            n_covariates=self.n_covariates,
            n_event_types=self.n_event_types,
        )

    def omega(self) -> np.ndarray:
        M = self.n_biomarkers
        om = np.full((M, M), self.omega_cross * self.omega_diag)
        np.fill_diagonal(om, self.omega_diag)
        return om

    def lts_omega(self) -> np.ndarray:
        M = self.n_biomarkers
        om = np.full((M, M), self.lts_omega_cross)
        np.fill_diagonal(om, self.lts_omega_diag)
        return om

    def scale(self, V) -> float:
        return float(np.exp(self.weibull_intercept + np.asarray(self.weibull_cov) @ V))

    def log_survival_true(self, u, V):
        return -np.power(np.asarray(u, dtype=float) / self.scale(V), self.weibull_shape)

    def survival_true(self, u, V):
        return np.exp(self.log_survival_true(u, V))

    def density_true(self, u, V):
        u = np.asarray(u, dtype=float)
        lam, k = self.scale(V), self.weibull_shape
        return (k / lam) * np.power(np.maximum(u, 1e-300) / lam, k - 1.0) * self.survival_true(u, V)

    def type1_prob(self, u, V):
        logit = self.type_intercept + self.type_time * np.asarray(u, dtype=float) \
            + float(np.asarray(self.type_cov) @ V)
        return 1.0 / (1.0 + np.exp(-logit))

    def cmt(self, m: int, t, V, event_time: float, event_type: int):
        """Conditional mean trajectory of biomarker m at times t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for l, key in enumerate(("g0", "g1")):
            part = self.traj[m][key]
            coef = part["const"] + float(np.asarray(part["cov"]) @ V)
            if event_type in range(1, self.n_event_types):
                coef += part["type"][event_type - 1]
                coef += part["phi_type"][event_type - 1] * event_time
            coef += part["phi"] * event_time
            out += coef * t ** l
        return out

    def cmt_lts(self, m: int, t, V):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for l, key in enumerate(("g0", "g1")):
            part = self.lts_traj[m][key]
            coef = part["const"] + float(np.asarray(part["cov"]) @ V)
            out += coef * t ** l
        return out

    def true_long_coef(self) -> np.ndarray:
        """Flat coefficient vector matching the fitted column manifest."""
        out = []
        for col in design_columns(self.spec(), lts=False):
            part = self.traj[col.biomarker]["g1" if col.part == 1 else "g0"]
            if col.kind == "const":
                out.append(part["const"])
            elif col.kind == "cov":
                out.append(part["cov"][col.index])
            elif col.kind == "type":
                out.append(part["type"][col.index - 1])
            elif col.kind == "phi":
                out.append(part["phi"])
            else:
                out.append(part["phi_type"][col.index - 1])
        return np.array(out)

    def true_lts_coef(self) -> np.ndarray:
        out = []
        for col in design_columns(self.spec(), lts=True):
            part = self.lts_traj[col.biomarker]["g1" if col.part == 1 else "g0"]
            out.append(part["const"] if col.kind == "const" else part["cov"][col.index])
        return np.array(out)


@dataclass(frozen=True)
class TruthRecord:
    """Per-subject latent values, for oracle use only (never for fitting)."""

    true_times: np.ndarray
    true_types: np.ndarray
    random_effects: np.ndarray
    is_lts: np.ndarray


# ---------------------------------------------------------------------------
# Censoring calibration
# ---------------------------------------------------------------------------

def _draw_event_times(config, rng, n):
    V = rng.standard_normal((n, config.n_covariates))
    scales = np.exp(config.weibull_intercept + V @ np.asarray(config.weibull_cov))
    T = scales * np.power(-np.log(rng.uniform(size=n)), 1.0 / config.weibull_shape)
    return V, T


def calibrate_censoring(config: GeneratorConfig, n_calib: int = 200_000) -> float:
    """Bisect the uniform censoring upper bound to hit the target rate.

    Deterministic given the config seed.  Raises CalibrationFailure when
    the target overall rate (and, for the two-part scenario, the
    administrative share at tau_max) cannot be reached within 3 points.
    """
    if config.censor_max is not None:
        return float(config.censor_max)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 987_654_321)))
    _, T = _draw_event_times(config, rng, n_calib)
    U = rng.uniform(size=n_calib)

    def censored_fraction(c_max):
        C = U * c_max
        if config.variant == TP:
            C = np.minimum(C, config.tau_max)
        return float(np.mean(C < T))

    lo, hi = 1e-2, 1e4
    if censored_fraction(hi) > config.target_censoring:
        raise CalibrationFailure("even very weak censoring exceeds the target rate")
    if censored_fraction(lo) < config.target_censoring:
        raise CalibrationFailure("target censoring rate unreachable")
    for _ in range(80):
        mid = np.sqrt(lo * hi)
        if censored_fraction(mid) > config.target_censoring:
            lo = mid
        else:
            hi = mid
    c_max = float(np.sqrt(lo * hi))
    achieved = censored_fraction(c_max)
    if abs(achieved - config.target_censoring) > 0.03:
        raise CalibrationFailure(f"calibrated rate {achieved:.3f} misses the target")
    if config.variant == TP:
        C = np.minimum(U * c_max, config.tau_max)
        admin = float(np.mean((T > config.tau_max) & (C >= config.tau_max)))
        if abs(admin - config.target_admin_censoring) > 0.03:
            raise CalibrationFailure(
                f"administrative censoring share {admin:.3f} misses the target "
                f"{config.target_admin_censoring}"
            )
    return c_max


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------

def _psd_factor(omega: np.ndarray) -> np.ndarray:
    """Square root of a PSD matrix; tolerates singular (e.g. zero) inputs."""
    vals, vecs = np.linalg.eigh(np.asarray(omega, dtype=float))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_cohort(config: GeneratorConfig) -> tuple[Dataset, TruthRecord]:
    """Draw one cohort; byte-identical for identical config and seed."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    c_max = calibrate_censoring(config)
    n, M = config.n, config.n_biomarkers
    V, T_true = _draw_event_times(config, rng, n)
    logit = config.type_intercept + config.type_time * T_true + V @ np.asarray(config.type_cov)
    p1 = 1.0 / (1.0 + np.exp(-logit))
    D_true = np.where(rng.uniform(size=n) < p1, 1, 2)
    C = rng.uniform(size=n) * c_max
    if config.variant == TP:
        C = np.minimum(C, config.tau_max)
    T_obs = np.minimum(T_true, C)
    observed = T_true <= C
    D_obs = np.where(observed, D_true, 0)

    is_lts = (T_true > config.tau_max) if config.variant == TP else np.zeros(n, dtype=bool)
    omega, omega_e = config.omega(), config.lts_omega()
    chol = _psd_factor(omega)
    chol_e = _psd_factor(omega_e)
    b_all = np.empty((n, M))

    subjects = []
    for i in range(n):
        z = rng.standard_normal(M)
        b = (chol_e if is_lts[i] else chol) @ z
        b_all[i] = b
        sigma2 = config.lts_sigma2 if is_lts[i] else config.sigma2
        meas = []
        for m in range(M):
            base = np.arange(config.visit_spacing, T_obs[i] + 4 * config.visit_spacing,
                             config.visit_spacing)
            jitter = rng.uniform(-config.visit_jitter, config.visit_jitter, size=base.size)
            t = np.sort(base + jitter)
            t = t[(t > 0) & (t <= T_obs[i])]
            if is_lts[i]:
                mean = config.cmt_lts(m, t, V[i])
            else:
                mean = config.cmt(m, t, V[i], float(T_true[i]), int(D_true[i]))
            y = mean + b[m] + np.sqrt(sigma2) * rng.standard_normal(t.size)
            meas.append((t, y))
        subjects.append(Subject(
            id=f"s{i:05d}",
            covariates=V[i],
            observed_time=float(T_obs[i]),
            event_type=int(D_obs[i]),
            measurements=tuple(meas),
        ))
    event_times = T_obs[D_obs > 0]
    tau = config.tau_max if config.variant == TP else float(event_times.max())
    dataset = Dataset(
        subjects=tuple(subjects),
        n_event_types=config.n_event_types,
        n_biomarkers=M,
        covariate_names=tuple(f"v{c + 1}" for c in range(config.n_covariates)),
        biomarker_names=tuple(f"y{m + 1}" for m in range(M)),
        tau_max=float(tau),
    )
    truth = TruthRecord(true_times=T_true, true_types=D_true,
                        random_effects=b_all, is_lts=is_lts)
    return dataset, truth


# ---------------------------------------------------------------------------
# Truth-equipped model (full parametric truth wrapped as a fitted model)
# ---------------------------------------------------------------------------

def model_from_truth(config: GeneratorConfig, width: float = 0.25,
                     t_end_ex: float = 100.0) -> CrBjmModel:
    """Wrap the generator's parameters as a CrBjmModel for oracle tests."""
    spec = config.spec()
    wb = WeibullFit(shape=config.weibull_shape,
                    coef=np.r_[config.weibull_intercept, config.weibull_cov])
    basis = SplineBasis.natural_cubic((0.0, 1.0))  # columns are exactly [1, t]
    etm = EventTypeFit(
        basis=basis,
        coef=np.array([[config.type_intercept, config.type_time, *config.type_cov]]),
        n_event_types=2,
    )
    survival = SurvivalFit(time_model=wb, event_type_model=etm, n_event_types=2)
    lts = None
    if config.variant == TP:
        lts = LtsFit(coef=config.true_lts_coef(), omega=config.lts_omega(),
                     sigma2=np.full(config.n_biomarkers, config.lts_sigma2),
                     column_names=column_names(spec, lts=True))
    fit = LongitudinalFit(
        coef=config.true_long_coef(),
        omega=config.omega(),
        sigma2=np.full(config.n_biomarkers, config.sigma2),
        column_names=column_names(spec, lts=False),
        lts=lts,
    )
    return CrBjmModel(
        variant=config.variant, spec=spec, survival=survival, longitudinal=fit,
        tau_max=config.tau_max if config.variant == TP else t_end_ex,
        quadrature_width=width, t_end_ex=t_end_ex,
        covariate_names=tuple(f"v{c + 1}" for c in range(config.n_covariates)),
        biomarker_names=tuple(f"y{m + 1}" for m in range(config.n_biomarkers)),
        provenance={"method": "truth"},
    )


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def _stack_history(history):
    times, biomarkers, values = [], [], []
    for m, (t, v) in enumerate(history.measurements):
        times.extend(t)
        biomarkers.extend([m] * len(t))
        values.extend(v)
    return (np.array(times), np.array(biomarkers, dtype=int), np.array(values))


def _history_affine_true(config, history, j):
    """Pieces of log f(history | T=u, D=j, V) as a quadratic in u.

    The conditional mean of each measurement is affine in the event time,
    mean(u) = base + u * slope, with base and slope read off the generator
    formulas; the covariance does not depend on u.
    """
    times, biomarkers, values = _stack_history(history)
    V = history.covariates
    base = np.array([config.cmt(int(b), np.array([t]), V, 0.0, j)[0]
                     for t, b in zip(times, biomarkers)])
    slope = np.array([config.cmt(int(b), np.array([t]), V, 1.0, j)[0]
                      for t, b in zip(times, biomarkers)]) - base
    omega = config.omega()
    cov = omega[np.ix_(biomarkers, biomarkers)] + np.eye(times.size) * config.sigma2
    chol = np.linalg.cholesky(cov)
    wy = scipy.linalg.solve_triangular(chol, values - base, lower=True)
    ws = scipy.linalg.solve_triangular(chol, slope, lower=True)
    const = times.size * np.log(2 * np.pi) + 2.0 * float(np.sum(np.log(np.diag(chol))))
    return wy, ws, const, chol, base, slope


def _history_loglik_true(config, history, u, j):
    """log f(history | T=u, D=j, V) assembled directly from the truth."""
    if history.n_measurements == 0:
        return 0.0 if np.ndim(u) == 0 else np.zeros(np.asarray(u).size)
    wy, ws, const, _, _, _ = _history_affine_true(config, history, j)
    u = np.asarray(u, dtype=float)
    q = (wy @ wy) - 2.0 * u * (wy @ ws) + (u ** 2) * (ws @ ws)
    out = -0.5 * (const + q)
    return float(out) if out.ndim == 0 else out


def _history_loglik_lts_true(config, history):
    times, biomarkers, values = _stack_history(history)
    if times.size == 0:
        return 0.0
    V = history.covariates
    mean = np.array([config.cmt_lts(int(b), np.array([t]), V)[0]
                     for t, b in zip(times, biomarkers)])
    omega = config.lts_omega()
    cov = omega[np.ix_(biomarkers, biomarkers)] + np.eye(times.size) * config.lts_sigma2
    return float(scipy.stats.multivariate_normal.logpdf(values, mean=mean, cov=cov))


def _oracle_grid(config, history, start: float, n_grid: int):
    V = history.covariates
    if config.variant == TP:
        upper = config.tau_max
    else:
        upper = config.scale(V) * (-np.log(1e-14)) ** (1.0 / config.weibull_shape)
        upper = max(upper, start + 1.0)
    return np.linspace(start, upper, n_grid)


def _oracle_weighted_density(config, history, u_grid, shift: float = 0.0):
    """g_j(u) = f(hist | u, j) f_T(u) P(D=j | u) on the grid, both types.

    All integrands are scaled by exp(-shift); pass the same shift to every
    grid entering one ratio so the scaling cancels exactly.
    """
    V = history.covariates
    f_t = config.density_true(u_grid, V)
    p1 = config.type1_prob(u_grid, V)
    loglik = np.column_stack([_history_loglik_true(config, history, u_grid, j)
                              for j in (1, 2)])
    lik = np.exp(loglik - shift)
    return np.column_stack([f_t * p1 * lik[:, 0], f_t * (1 - p1) * lik[:, 1]])


def oracle_risk(config: GeneratorConfig, history, delta: float,
                n_grid: int = 10_000) -> tuple[np.ndarray, float]:
    """Fine-grid evaluation of the event-risk estimand under the truth.

    Numerator and denominator integrals run on their own grids so the
    horizon endpoint is an exact node.
    """
    s = history.prediction_time
    shift = _history_loglik_true(config, history, s + 0.5 * delta, 1)
    den_grid = _oracle_grid(config, history, s, n_grid)
    g_den = _oracle_weighted_density(config, history, den_grid, shift)
    denom = float(np.trapezoid(g_den[:, 0], den_grid) + np.trapezoid(g_den[:, 1], den_grid))
    if config.variant == TP:
        tail = np.exp(_history_loglik_lts_true(config, history) - shift
                      + config.log_survival_true(config.tau_max, history.covariates))
        denom += float(tail)
    num_grid = np.linspace(s, s + delta, n_grid)
    g_num = _oracle_weighted_density(config, history, num_grid, shift)
    num = np.array([np.trapezoid(g_num[:, j], num_grid) for j in range(2)])
    risks = num / denom
    return risks, 1.0 - risks.sum()


def oracle_forecast_density(config: GeneratorConfig, history, m: int, t: float,
                            values, n_grid: int = 10_000) -> np.ndarray:
    """Fine-grid evaluation of the future-biomarker density under the truth."""
    V = history.covariates
    grid = _oracle_grid(config, history, t, n_grid)
    shift = _history_loglik_true(config, history, t + 0.5, 1)
    g = _oracle_weighted_density(config, history, grid, shift)
    values = np.asarray(values, dtype=float)

    times, biomarkers, obs = _stack_history(history)
    omega = config.omega()
    n_h = times.size
    dens_accum = np.zeros((values.size,))
    for j in (1, 2):
        c0 = config.cmt(m, np.array([t]), V, 0.0, j)[0]
        c1 = config.cmt(m, np.array([t]), V, 1.0, j)[0] - c0
        if n_h:
            cov_hh = omega[np.ix_(biomarkers, biomarkers)] + np.eye(n_h) * config.sigma2
            cov_hy = omega[biomarkers, m]
            solve = np.linalg.solve(cov_hh, cov_hy)
            cond_var = omega[m, m] + config.sigma2 - float(cov_hy @ solve)
            base = np.array([config.cmt(int(b), np.array([tt]), V, 0.0, j)[0]
                             for tt, b in zip(times, biomarkers)])
            slope = np.array([config.cmt(int(b), np.array([tt]), V, 1.0, j)[0]
                              for tt, b in zip(times, biomarkers)]) - base
            a0 = c0 + float(solve @ (obs - base))
            a1 = c1 - float(solve @ slope)
            cond_means = a0 + a1 * grid
        else:
            cond_var = omega[m, m] + config.sigma2
            cond_means = c0 + c1 * grid
        sd = np.sqrt(cond_var)
        z = (values[:, None] - cond_means[None, :]) / sd
        comp = np.exp(-0.5 * z ** 2) / (sd * np.sqrt(2 * np.pi))
        dens_accum += np.trapezoid(comp * g[:, j - 1][None, :], grid, axis=1)
    denom = float(np.trapezoid(g[:, 0], grid) + np.trapezoid(g[:, 1], grid))
    if config.variant == TP:
        lts_w = np.exp(_history_loglik_lts_true(config, history) - shift
                       + config.log_survival_true(config.tau_max, V))
        omega_e = config.lts_omega()
        if n_h:
            cov_hh = omega_e[np.ix_(biomarkers, biomarkers)] + np.eye(n_h) * config.lts_sigma2
            cov_hy = omega_e[biomarkers, m]
            solve = np.linalg.solve(cov_hh, cov_hy)
            var_e = omega_e[m, m] + config.lts_sigma2 - float(cov_hy @ solve)
            mean_h = np.array([config.cmt_lts(int(b), np.array([tt]), V)[0]
                               for tt, b in zip(times, biomarkers)])
            mu_e = config.cmt_lts(m, np.array([t]), V)[0] + float(solve @ (obs - mean_h))
        else:
            var_e = omega_e[m, m] + config.lts_sigma2
            mu_e = config.cmt_lts(m, np.array([t]), V)[0]
        dens_accum += float(lts_w) * scipy.stats.norm.pdf(values, loc=mu_e,
                                                          scale=np.sqrt(var_e))
        denom += float(lts_w)
    return dens_accum / denom


def mc_oracle_risk(config: GeneratorConfig, history, delta: float,
                   n_draws: int = 1_000_000, seed: int = 0):
    """Likelihood-weighted Monte Carlo estimate of the risk, with its SE."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))
    V = history.covariates
    s = history.prediction_time
    lam, k = config.scale(V), config.weibull_shape
    # draw event times conditional on T > s by inverse CDF
    base = (s / lam) ** k
    T = lam * np.power(base - np.log(rng.uniform(size=n_draws)), 1.0 / k)
    p1 = 1.0 / (1.0 + np.exp(-(config.type_intercept + config.type_time * T
                               + float(np.asarray(config.type_cov) @ V))))
    D = np.where(rng.uniform(size=n_draws) < p1, 1, 2)
    if config.variant == TP:
        keep = T <= config.tau_max
        # draws past tau belong to the LTS component
        lts_mask = ~keep
    else:
        lts_mask = np.zeros(n_draws, dtype=bool)

    logw = np.empty(n_draws)
    for j in (1, 2):
        mask = (D == j) & ~lts_mask
        if mask.any():
            logw[mask] = _mc_loglik_batch(config, history, T[mask], j)
    if lts_mask.any():
        logw[lts_mask] = _history_loglik_lts_true(config, history)
    w = np.exp(logw - logw.max())
    est = np.zeros(2)
    ses = np.zeros(2)
    wsum = w.sum()
    for j in (1, 2):
        a = ((T > s) & (T <= s + delta) & (D == j) & ~lts_mask).astype(float)
        r = float((w * a).sum() / wsum)
        se = float(np.sqrt(np.sum((w / wsum) ** 2 * (a - r) ** 2)))
        est[j - 1] = r
        ses[j - 1] = se
    return est, ses


def _mc_loglik_batch(config, history, u_batch, j):
    """Vectorized history log-likelihood over many event times, one type."""
    if history.n_measurements == 0:
        return np.zeros(np.asarray(u_batch).size)
    return _history_loglik_true(config, history, np.asarray(u_batch, dtype=float), j)


# ---------------------------------------------------------------------------
# Monte Carlo simulation study
# ---------------------------------------------------------------------------

def _study_replicate(config_dict: dict, rep: int, em_tol: float, em_max_iter: int):
    """One replicate: simulate, fit survival + CCA, then EM; return vectors."""
    config = GeneratorConfig.from_dict(config_dict)
    config.seed = int(np.random.SeedSequence((config.seed, rep)).generate_state(1)[0])
    try:
        dataset, _ = simulate_cohort(config)
        from .estimation import fit_crbjm
        from .survival import fit_survival

        spec = config.spec()
        survival = fit_survival(dataset, time_model="weibull")
        cca = fit_cca(dataset, spec, survival, variant=config.variant)
        model_cca = CrBjmModel(
            variant=config.variant, spec=spec, survival=survival, longitudinal=cca,
            tau_max=dataset.tau_max, covariate_names=dataset.covariate_names,
            biomarker_names=dataset.biomarker_names, provenance={"method": "cca"})
        names, vec_cca = parameter_vector(model_cca)
        em, trace = em_fit(dataset, spec, survival, cca, tol=em_tol,
                           max_iter=em_max_iter, variant=config.variant)
        model_em = CrBjmModel(
            variant=config.variant, spec=spec, survival=survival, longitudinal=em,
            tau_max=dataset.tau_max, covariate_names=dataset.covariate_names,
            biomarker_names=dataset.biomarker_names, provenance={"method": "em"})
        _, vec_em = parameter_vector(model_em)
        return names, vec_cca, vec_em, len(trace)
    except Exception as exc:  # per-replicate failures are recorded, not fatal
        return ("__failed__", repr(exc))


def true_parameter_table(config: GeneratorConfig) -> dict:
    """Truth values keyed by canonical parameter names (where defined)."""
    truth = {
        "surv:weibull:shape": config.weibull_shape,
        "surv:weibull:intercept": config.weibull_intercept,
    }
    for c in range(config.n_covariates):
        truth[f"surv:weibull:v{c + 1}"] = config.weibull_cov[c]
    truth["surv:type1:b0"] = config.type_intercept
    truth["surv:type1:b1"] = config.type_time
    for c in range(config.n_covariates):
        truth[f"surv:type1:v{c + 1}"] = config.type_cov[c]
    spec = config.spec()
    for nm, v in zip(column_names(spec, lts=False), config.true_long_coef()):
        truth[f"long:{nm}"] = float(v)
    omega = config.omega()
    for m in range(config.n_biomarkers):
        truth[f"long:sigma2:y{m + 1}"] = config.sigma2
    for a in range(config.n_biomarkers):
        for b in range(a + 1):
            truth[f"long:omega:{a + 1}.{b + 1}"] = float(omega[a, b])
    if config.variant == TP:
        for nm, v in zip(column_names(spec, lts=True), config.true_lts_coef()):
            truth[f"lts:{nm}"] = float(v)
        omega_e = config.lts_omega()
        for m in range(config.n_biomarkers):
            truth[f"lts:sigma2:y{m + 1}"] = config.lts_sigma2
        for a in range(config.n_biomarkers):
            for b in range(a + 1):
                truth[f"lts:omega:{a + 1}.{b + 1}"] = float(omega_e[a, b])
    return truth


def _group_of(name: str) -> str:
    if name.startswith("surv:"):
        return "survival"
    if ":sigma2:" in name or ":omega:" in name:
        return "variance"
    if name.startswith("lts:"):
        return "lts"
    return "longitudinal"


def run_mc_study(
    config: GeneratorConfig,
    n_datasets: int = 300,
    workers: int = 1,
    em_tol: float = 1e-4,
    em_max_iter: int = 200,
) -> tuple[pd.DataFrame, dict]:
    """Bias and efficiency study over independent Monte Carlo cohorts.

    Returns a table with percent bias per estimator and the relative
    efficiency SD(EM)/SD(CCA) per parameter, plus a summary dict with the
    EM convergence fraction and failure count.
    """
    args = [(config.to_dict(), rep, em_tol, em_max_iter) for rep in range(n_datasets)]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            outs = pool.starmap(_study_replicate, args)
    else:
        outs = [_study_replicate(*a) for a in args]

    names = None
    cca_vecs, em_vecs, iters = [], [], []
    failures = []
    for rep, out in enumerate(outs):
        if out[0] == "__failed__":
            failures.append((rep, out[1]))
            continue
        names, vec_cca, vec_em, n_iter = out
        cca_vecs.append(vec_cca)
        em_vecs.append(vec_em)
        iters.append(n_iter)
    if not cca_vecs:
        raise CalibrationFailure("every study replicate failed")
    cca = np.vstack(cca_vecs)
    em = np.vstack(em_vecs)
    truth = true_parameter_table(config)

    rows = []
    for k, name in enumerate(names):
        tv = truth.get(name, np.nan)
        mean_cca, mean_em = float(cca[:, k].mean()), float(em[:, k].mean())
        sd_cca = float(cca[:, k].std(ddof=1))
        sd_em = float(em[:, k].std(ddof=1))
        rows.append({
            "parameter": name,
            "group": _group_of(name),
            "truth": tv,
            "mean_cca": mean_cca,
            "mean_em": mean_em,
            "pct_bias_cca": 100.0 * (mean_cca - tv) / tv if tv not in (0.0,) and np.isfinite(tv) else np.nan,
            "pct_bias_em": 100.0 * (mean_em - tv) / tv if tv not in (0.0,) and np.isfinite(tv) else np.nan,
            "sd_cca": sd_cca,
            "sd_em": sd_em,
            "rel_efficiency": sd_em / sd_cca if sd_cca > 0 else np.nan,
        })
    n_em_failures = sum(1 for _, msg in failures if "NoConvergence" in msg)
    summary = {
        "n_datasets": n_datasets,
        "n_converged": len(em_vecs),
        "n_failed": len(failures),
        "failures": failures[:10],
        "em_convergence_fraction": len(em_vecs) / max(len(em_vecs) + n_em_failures, 1),
        "mean_em_iterations": float(np.mean(iters)) if iters else np.nan,
    }
    return pd.DataFrame(rows), summary
