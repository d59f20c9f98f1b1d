"""Model fitting: complete-case analysis, EM, and bootstrap variances.

The EM treats censored event times and types as missing data.  Posterior
weights are computed on a per-subject quadrature grid; the M-step updates
the longitudinal coefficients by weighted generalized least squares with
the random-effect covariance and residual variances frozen at their
complete-case values (pseudo maximum likelihood).  Survival parameters are
never touched by the EM.

Because the conditional mean of the measurements is affine in phi(u) for a
fixed event type, each subject's grid of log-likelihoods collapses to a
quadratic polynomial in phi(u) whose coefficients come from a handful of
precomputed quadratic forms; E and M steps cost O(1) per subject and grid
cell after a one-time factorization pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from .data import Dataset, split_lts
from .errors import (
    DegenerateWeights,
    NoConvergence,
    TooFewCompleteCases,
    TooManyFailures,
)
from .longitudinal import (
    LongitudinalFit,
    LongitudinalSpec,
    LtsFit,
    StackedLMM,
    build_design,
    column_names,
    design_parts,
    fit_lmm_ml,
    solve_normal_equations,
    stack_measurements,
    subject_covariance,
)
from .numerics import (
    _LOG_2PI,
    DEFAULT_GRID_WIDTH,
    DEFAULT_T_END_EX,
    EX,
    TP,
    build_grid,
    chol_psd,
)
from .survival import SurvivalFit, fit_survival


@dataclass(frozen=True)
class CrBjmModel:
    """A fitted competing-risk backward joint model."""

    variant: str
    spec: LongitudinalSpec
    survival: SurvivalFit
    longitudinal: LongitudinalFit
    tau_max: float
    quadrature_width: float = DEFAULT_GRID_WIDTH
    t_end_ex: float = DEFAULT_T_END_EX
    # predictions are pointwise ratios rather than cell averages and need a
    # finer grid for the same accuracy; None means quadrature_width / 5
    prediction_width: float | None = None
    covariate_names: tuple[str, ...] = ()
    biomarker_names: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    @property
    def effective_prediction_width(self) -> float:
        if self.prediction_width is not None:
            return self.prediction_width
        return self.quadrature_width / 5.0

    def __post_init__(self):
        if self.variant not in (EX, TP):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == TP and self.longitudinal.lts is None:
            raise ValueError("two-part models require a fitted LTS component")
        if self.variant == EX and self.longitudinal.lts is not None:
            raise ValueError("extrapolation models must not carry an LTS component")


@dataclass(frozen=True)
class PosteriorWeights:
    """Posterior cell weights for censored subjects.

    cell_weights[i] has shape (K_i_nontail, J); tail_weights[i] is the
    two-part tail mass (0 for the extrapolation variant).  Weights sum to
    one per subject.
    """

    subject_indices: np.ndarray
    cell_weights: tuple[np.ndarray, ...]
    tail_weights: np.ndarray

    def total(self, i: int) -> float:
        return float(self.cell_weights[i].sum() + self.tail_weights[i])


# ---------------------------------------------------------------------------
# Complete-case analysis
# ---------------------------------------------------------------------------

def fit_cca(
    dataset: Dataset,
    spec: LongitudinalSpec,
    survival: SurvivalFit | None = None,
    variant: str = EX,
) -> LongitudinalFit:
    """Maximum likelihood on complete cases only.

    The main model uses subjects with an observed event (restricted to
    event times at or before tau_max under the two-part variant); the LTS
    model uses subjects observed beyond tau_max.  The survival fit is not
    needed for this step and is accepted only for pipeline symmetry.
    """
    del survival
    non_lts, lts_idx, _ = split_lts(dataset)
    if variant == EX:
        complete = [i for i, s in enumerate(dataset.subjects) if s.event_type != 0]
    else:
        complete = list(non_lts)

    entries = []
    for i in complete:
        s = dataset.subjects[i]
        times, biom, values = stack_measurements(s.measurements)
        if times.size:
            entries.append((times, biom, values, s.covariates, s.observed_time, s.event_type))
    names = column_names(spec, lts=False, biomarker_names=None, covariate_names=None)
    if len(entries) < len(names) + 2:
        raise TooFewCompleteCases(
            f"{len(entries)} complete cases with data for {len(names)} columns"
        )
    stacked = StackedLMM.from_subjects(spec, entries, lts=False)
    coef, omega, sigma2, _ = fit_lmm_ml(stacked)

    lts_fit = None
    if variant == TP:
        lts_entries = []
        for i in lts_idx:
            s = dataset.subjects[i]
            times, biom, values = stack_measurements(s.measurements)
            if times.size:
                lts_entries.append((times, biom, values, s.covariates, None, None))
        lts_names = column_names(spec, lts=True)
        if len(lts_entries) < len(lts_names) + 2:
            raise TooFewCompleteCases(
                f"LTS stratum has {len(lts_entries)} subjects with data for "
                f"{len(lts_names)} columns"
            )
        lts_stacked = StackedLMM.from_subjects(spec, lts_entries, lts=True)
        lcoef, lomega, lsigma2, _ = fit_lmm_ml(lts_stacked)
        lts_fit = LtsFit(coef=lcoef, omega=lomega, sigma2=lsigma2, column_names=lts_names)
    return LongitudinalFit(coef=coef, omega=omega, sigma2=sigma2,
                           column_names=names, lts=lts_fit)


# ---------------------------------------------------------------------------
# Per-subject precomputed blocks
# ---------------------------------------------------------------------------

class _SubjectBlocks:
    """Quadratic-form blocks for one censored subject.

    With W = Sigma^-1 (measurement covariance, fixed during EM) and the
    affine design X(u, j) = X0_j + phi(u) X1_j, everything the E and M
    steps need reduces to X0'WX0, X0'WX1, X1'WX1, X0'Wy, X1'Wy and y'Wy.
    """

    __slots__ = ("phis", "log_mass", "log_tail", "has_meas", "const", "yy",
                 "a00", "a01", "a11", "b0", "b1",
                 "lts_const", "lts_yy", "lts_a", "lts_b")

    def __init__(self, spec, fit, survival, subject, grid, variant):
        J = spec.n_event_types
        n_nontail = grid.n_intervals - (1 if grid.has_tail else 0)
        mids = grid.midpoints[:n_nontail]
        self.phis = spec.phi_of(mids) if n_nontail else np.zeros(0)
        self.log_mass, self.log_tail = survival.log_cell_masses(grid, subject.covariates)

        times, biom, values = stack_measurements(subject.measurements)
        self.has_meas = times.size > 0
        P = len(fit.coef)
        if not self.has_meas:
            self.const = 0.0
            self.yy = 0.0
            self.a00 = np.zeros((J, P, P))
            self.a01 = np.zeros((J, P, P))
            self.a11 = np.zeros((J, P, P))
            self.b0 = np.zeros((J, P))
            self.b1 = np.zeros((J, P))
        else:
            cov = subject_covariance(spec, fit.omega, fit.sigma2, times, biom)
            chol = chol_psd(cov)
            self.const = times.size * _LOG_2PI + 2.0 * float(np.sum(np.log(np.diag(chol))))
            wy = scipy.linalg.solve_triangular(chol, values, lower=True)
            self.yy = float(wy @ wy)
            X0, X1 = design_parts(spec, times, biom, subject.covariates)
            self.a00 = np.empty((J, P, P))
            self.a01 = np.empty((J, P, P))
            self.a11 = np.empty((J, P, P))
            self.b0 = np.empty((J, P))
            self.b1 = np.empty((J, P))
            for j in range(J):
                w0 = scipy.linalg.solve_triangular(chol, X0[j], lower=True)
                w1 = scipy.linalg.solve_triangular(chol, X1[j], lower=True)
                self.a00[j] = w0.T @ w0
                self.a01[j] = w0.T @ w1
                self.a11[j] = w1.T @ w1
                self.b0[j] = w0.T @ wy
                self.b1[j] = w1.T @ wy

        self.lts_const = 0.0
        self.lts_yy = 0.0
        self.lts_a = None
        self.lts_b = None
        if variant == TP and fit.lts is not None:
            Pe = len(fit.lts.coef)
            if not self.has_meas:
                self.lts_a = np.zeros((Pe, Pe))
                self.lts_b = np.zeros(Pe)
            else:
                cov_e = subject_covariance(spec, fit.lts.omega, fit.lts.sigma2, times, biom)
                chol_e = chol_psd(cov_e)
                self.lts_const = times.size * _LOG_2PI + 2.0 * float(
                    np.sum(np.log(np.diag(chol_e))))
                Xe, _ = build_design(spec, times, biom, subject.covariates, lts=True)
                we = scipy.linalg.solve_triangular(chol_e, Xe, lower=True)
                wye = scipy.linalg.solve_triangular(chol_e, values, lower=True)
                self.lts_yy = float(wye @ wye)
                self.lts_a = we.T @ we
                self.lts_b = we.T @ wye

    def cell_logliks(self, beta) -> np.ndarray:
        """(K_nontail, J) longitudinal log-likelihoods at the cell midpoints."""
        J = self.b0.shape[0]
        q0 = self.yy - 2.0 * (self.b0 @ beta) + np.einsum("jpq,p,q->j", self.a00, beta, beta)
        q1 = self.b1 @ beta - np.einsum("jpq,p,q->j", self.a01, beta, beta)
        q2 = np.einsum("jpq,p,q->j", self.a11, beta, beta)
        phi = self.phis[:, None]
        return -0.5 * (self.const + q0[None, :] - 2.0 * phi * q1[None, :]
                       + (phi ** 2) * q2[None, :])

    def lts_loglik(self, beta_e) -> float:
        q = self.lts_yy - 2.0 * float(self.lts_b @ beta_e) + float(beta_e @ self.lts_a @ beta_e)
        return -0.5 * (self.lts_const + q)


def _fixed_blocks(spec, fit, subject, event_time, event_type):
    """X'WX, X'Wy, y'Wy and the Gaussian constant at a fixed (T, D)."""
    times, biom, values = stack_measurements(subject.measurements)
    P = len(fit.coef)
    if times.size == 0:
        return np.zeros((P, P)), np.zeros(P), 0.0, 0.0
    cov = subject_covariance(spec, fit.omega, fit.sigma2, times, biom)
    chol = chol_psd(cov)
    X, _ = build_design(spec, times, biom, subject.covariates, event_time, event_type)
    wx = scipy.linalg.solve_triangular(chol, X, lower=True)
    wy = scipy.linalg.solve_triangular(chol, values, lower=True)
    const = times.size * _LOG_2PI + 2.0 * float(np.sum(np.log(np.diag(chol))))
    return wx.T @ wx, wx.T @ wy, float(wy @ wy), const


class _EmEngine:
    """One-time factorizations plus cheap per-iteration E/M computations."""

    def __init__(self, dataset, spec, survival, fit, variant, width, t_end_ex):
        self.spec = spec
        self.variant = variant
        self.J = spec.n_event_types
        self.censored_idx = np.array(
            [i for i, s in enumerate(dataset.subjects) if s.event_type == 0], dtype=int)
        self.grids = {
            int(i): build_grid(dataset.subjects[i].observed_time, dataset.tau_max,
                               width, variant, t_end_ex)
            for i in self.censored_idx
        }
        self.blocks = [
            _SubjectBlocks(spec, fit, survival, dataset.subjects[i], self.grids[int(i)], variant)
            for i in self.censored_idx
        ]
        # uncensored subjects enter the normal equations with weight one at
        # their observed event time and type
        P = len(fit.coef)
        self.base_ata = np.zeros((P, P))
        self.base_atb = np.zeros(P)
        self._unc_yy = 0.0
        self._unc_const = 0.0
        for s in dataset.subjects:
            if s.event_type == 0:
                continue
            a, b, yy, const = _fixed_blocks(spec, fit, s, s.observed_time, s.event_type)
            self.base_ata += a
            self.base_atb += b
            self._unc_yy += yy
            self._unc_const += const

    def weights_and_moments(self, beta, beta_e):
        """E-step: posterior weights, phi-moments, and the observed objective."""
        J = self.J
        cell_w, tail_w = [], []
        moments = []
        lts_stats = []
        objective = 0.0
        for i, blk in zip(self.censored_idx, self.blocks):
            terms = blk.cell_logliks(beta) + blk.log_mass
            pieces = [terms.ravel()]
            if self.variant == TP:
                tail_term = blk.lts_loglik(beta_e) + blk.log_tail
                pieces.append(np.array([tail_term]))
            allterms = np.concatenate(pieces)
            total = float(scipy.special.logsumexp(allterms))
            if not np.isfinite(total):
                raise DegenerateWeights(f"all posterior masses vanish for subject index {i}")
            w = np.exp(terms - total)
            tw = float(np.exp(tail_term - total)) if self.variant == TP else 0.0
            cell_w.append(w)
            tail_w.append(tw)
            phi = blk.phis
            s0 = w.sum(axis=0)
            s1 = (w * phi[:, None]).sum(axis=0) if phi.size else np.zeros(J)
            s2 = (w * (phi ** 2)[:, None]).sum(axis=0) if phi.size else np.zeros(J)
            moments.append((s0, s1, s2))
            lts_stats.append(tw)
            objective += total
        # uncensored longitudinal log-likelihood at the current coefficients
        objective += -0.5 * (self._unc_const + self._unc_yy
                             - 2.0 * float(self.base_atb @ beta)
                             + float(beta @ self.base_ata @ beta))
        weights = PosteriorWeights(
            subject_indices=self.censored_idx,
            cell_weights=tuple(cell_w),
            tail_weights=np.array(tail_w),
        )
        return weights, moments, np.array(lts_stats), objective

    def m_step(self, moments, lts_weights, beta_e_dim):
        P = self.base_ata.shape[0]
        ata = self.base_ata.copy()
        atb = self.base_atb.copy()
        for blk, (s0, s1, s2) in zip(self.blocks, moments):
            if not blk.has_meas:
                continue
            ata += np.einsum("j,jpq->pq", s0, blk.a00)
            sym = np.einsum("j,jpq->pq", s1, blk.a01)
            ata += sym + sym.T
            ata += np.einsum("j,jpq->pq", s2, blk.a11)
            atb += s0 @ blk.b0 + s1 @ blk.b1
        beta = solve_normal_equations(ata, atb)
        beta_e = None
        if self.variant == TP:
            ata_e = np.zeros((beta_e_dim, beta_e_dim))
            atb_e = np.zeros(beta_e_dim)
            for blk, tw in zip(self.blocks, lts_weights):
                if blk.lts_a is not None and tw > 0:
                    ata_e += tw * blk.lts_a
                    atb_e += tw * blk.lts_b
            beta_e = solve_normal_equations(ata_e, atb_e)
        return beta, beta_e


def e_step(
    dataset: Dataset,
    spec: LongitudinalSpec,
    survival: SurvivalFit,
    current: LongitudinalFit,
    variant: str = EX,
    grids=None,
    width: float = DEFAULT_GRID_WIDTH,
    t_end_ex: float = DEFAULT_T_END_EX,
) -> PosteriorWeights:
    """Posterior distribution of (event time cell, event type) per censored subject.

    Weights combine the longitudinal likelihood at each cell midpoint with
    the survival-model cell mass, normalized per subject in log space.
    Unconditional and at-risk-conditioned survival masses give identical
    weights because the conditioning factor cancels in the normalization.
    """
    del grids  # grids are rebuilt internally from the model configuration
    engine = _EmEngine(dataset, spec, survival, current, variant, width, t_end_ex)
    beta_e = current.lts.coef if current.lts is not None else None
    weights, _, _, _ = engine.weights_and_moments(current.coef, beta_e)
    return weights


def em_fit(
    dataset: Dataset,
    spec: LongitudinalSpec,
    survival: SurvivalFit,
    init: LongitudinalFit,
    tol: float = 1e-4,
    max_iter: int = 200,
    variant: str = EX,
    width: float = DEFAULT_GRID_WIDTH,
    t_end_ex: float = DEFAULT_T_END_EX,
) -> tuple[LongitudinalFit, list[dict]]:
    """EM iterations for the longitudinal coefficients.

    Random-effect and residual variances stay frozen at their initial
    (complete-case) values; survival parameters are fixed throughout.
    Convergence is declared when no coefficient moves by more than tol.
    Returns the fit and a per-iteration trace of the discretized
    observed-data objective and the maximum coefficient change.
    """
    engine = _EmEngine(dataset, spec, survival, init, variant, width, t_end_ex)
    beta = init.coef.copy()
    beta_e = init.lts.coef.copy() if init.lts is not None else None
    trace = []
    for it in range(1, max_iter + 1):
        _, moments, lts_w, objective = engine.weights_and_moments(beta, beta_e)
        new_beta, new_beta_e = engine.m_step(
            moments, lts_w, len(beta_e) if beta_e is not None else 0)
        change = float(np.max(np.abs(new_beta - beta))) if beta.size else 0.0
        if beta_e is not None:
            change = max(change, float(np.max(np.abs(new_beta_e - beta_e))))
        beta, beta_e = new_beta, new_beta_e
        trace.append({"iteration": it, "objective": objective, "max_change": change})
        if change < tol:
            return init.with_coef(beta, beta_e), trace
    raise NoConvergence(f"EM did not converge within {max_iter} iterations "
                        f"(last change {trace[-1]['max_change']:.3g})")


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def fit_crbjm(
    dataset: Dataset,
    spec: LongitudinalSpec | None = None,
    variant: str = EX,
    method: str = "em",
    time_model: str = "weibull",
    basis=None,
    width: float = DEFAULT_GRID_WIDTH,
    t_end_ex: float = DEFAULT_T_END_EX,
    tol: float = 1e-4,
    max_iter: int = 200,
    **spec_options,
) -> CrBjmModel:
    """Two-step fit: survival sub-model, CCA, then optionally the EM."""
    if spec is None:
        spec = LongitudinalSpec.for_dataset(dataset, **spec_options)
    survival = fit_survival(dataset, time_model=time_model, basis=basis)
    fit = fit_cca(dataset, spec, survival, variant=variant)
    provenance = {"method": "cca", "iterations": 0, "final_change": 0.0}
    if method == "em":
        fit, trace = em_fit(dataset, spec, survival, fit, tol=tol, max_iter=max_iter,
                            variant=variant, width=width, t_end_ex=t_end_ex)
        provenance = {"method": "em", "iterations": len(trace),
                      "final_change": trace[-1]["max_change"]}
    elif method != "cca":
        raise ValueError(f"unknown method {method!r}")
    return CrBjmModel(
        variant=variant,
        spec=spec,
        survival=survival,
        longitudinal=fit,
        tau_max=dataset.tau_max,
        quadrature_width=width,
        t_end_ex=t_end_ex,
        covariate_names=dataset.covariate_names,
        biomarker_names=dataset.biomarker_names,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Parameter flattening (bootstrap, simulation study, reports)
# ---------------------------------------------------------------------------

def parameter_vector(model: CrBjmModel) -> tuple[list[str], np.ndarray]:
    """Canonical (names, values) flattening of every fitted parameter."""
    names, values = [], []
    tm = model.survival.time_model
    if hasattr(tm, "shape"):
        names.append("surv:weibull:shape")
        values.append(tm.shape)
        labels = ["intercept"] + list(model.covariate_names)
        for lab, v in zip(labels, tm.coef):
            names.append(f"surv:weibull:{lab}")
            values.append(v)
    else:
        for lab, v in zip(model.covariate_names, tm.coef):
            names.append(f"surv:cox:{lab}")
            values.append(v)
        names.append("surv:cox:tail_rate")
        values.append(tm.tail_rate)
    etm = model.survival.event_type_model
    if etm is not None:
        d_basis = etm.basis.dimension
        for j in range(etm.coef.shape[0]):
            for k in range(etm.coef.shape[1]):
                lab = f"b{k}" if k < d_basis else str(model.covariate_names[k - d_basis])
                names.append(f"surv:type{j + 1}:{lab}")
                values.append(etm.coef[j, k])
    fit = model.longitudinal
    for nm, v in zip(fit.column_names, fit.coef):
        names.append(f"long:{nm}")
        values.append(v)
    for m, v in enumerate(fit.sigma2):
        bl = model.biomarker_names[m] if model.biomarker_names else f"y{m + 1}"
        names.append(f"long:sigma2:{bl}")
        values.append(v)
    q = fit.omega.shape[0]
    for a in range(q):
        for b in range(a + 1):
            names.append(f"long:omega:{a + 1}.{b + 1}")
            values.append(fit.omega[a, b])
    if fit.lts is not None:
        for nm, v in zip(fit.lts.column_names, fit.lts.coef):
            names.append(f"lts:{nm}")
            values.append(v)
        for m, v in enumerate(fit.lts.sigma2):
            bl = model.biomarker_names[m] if model.biomarker_names else f"y{m + 1}"
            names.append(f"lts:sigma2:{bl}")
            values.append(v)
        qe = fit.lts.omega.shape[0]
        for a in range(qe):
            for b in range(a + 1):
                names.append(f"lts:omega:{a + 1}.{b + 1}")
                values.append(fit.lts.omega[a, b])
    return names, np.array(values, dtype=float)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def _resample(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    idx = rng.integers(0, dataset.n, size=dataset.n)
    subjects = []
    for new_id, i in enumerate(idx):
        s = dataset.subjects[i]
        subjects.append(type(s)(
            id=f"b{new_id}", covariates=s.covariates, observed_time=s.observed_time,
            event_type=s.event_type, measurements=s.measurements,
        ))
    from dataclasses import replace
    return replace(dataset, subjects=tuple(subjects))


def bootstrap_replicate(dataset: Dataset, fit_kwargs: dict, seed_material) -> tuple[list[str], np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed_material))
    boot = _resample(dataset, rng)
    model = fit_crbjm(boot, **fit_kwargs)
    return parameter_vector(model)


def bootstrap(
    dataset: Dataset,
    spec: LongitudinalSpec | None = None,
    reps: int = 200,
    seed: int = 0,
    workers: int = 1,
    max_failure_fraction: float = 0.2,
    **fit_kwargs,
):
    """Nonparametric bootstrap over subjects.

    Each replicate refits the full pipeline (survival, CCA, EM).  Returns
    (names, per-parameter SDs, n_failures).  Replicates that fail to fit
    are recorded and excluded; more than max_failure_fraction failures
    raises TooManyFailures.
    """
    if reps < 2:
        raise ValueError("bootstrap needs reps >= 2")
    if spec is not None:
        fit_kwargs = dict(fit_kwargs, spec=spec)
    tasks = [(dataset, fit_kwargs, (seed, r)) for r in range(reps)]
    results: list = [None] * reps
    failures = 0
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            outs = pool.starmap(_bootstrap_task, tasks)
    else:
        outs = [_bootstrap_task(*t) for t in tasks]
    names = None
    vectors = []
    for out in outs:
        if out is None:
            failures += 1
            continue
        nm, vec = out
        names = nm
        vectors.append(vec)
    if failures > max_failure_fraction * reps:
        raise TooManyFailures(f"{failures}/{reps} bootstrap replicates failed")
    if not vectors:
        raise TooManyFailures("all bootstrap replicates failed")
    mat = np.vstack(vectors)
    sds = mat.std(axis=0, ddof=1)
    return names, sds, failures


def _bootstrap_task(dataset, fit_kwargs, seed_material):
    try:
        return bootstrap_replicate(dataset, fit_kwargs, seed_material)
    except Exception:
        return None
