"""Longitudinal sub-models conditional on event time and type.

Each biomarker's conditional mean trajectory is a polynomial in the
measurement time whose coefficients vary with the baseline covariates, the
(transformed) event time and the event type.  Random effects (intercept,
optionally slope) are shared across biomarkers through an unstructured
covariance, and are integrated out analytically, so a subject's stacked
measurements are marginally Gaussian given (event time, event type,
covariates).

The long-term survivor (LTS) model used by the two-part variant has the
same shape but its coefficients depend on the baseline covariates only.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import NonPositiveTime, RankDeficientDesign
from .numerics import _LOG_2PI, chol_psd, mvn_logpdf


# ---------------------------------------------------------------------------
# Specification and column manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LongitudinalSpec:
    """Structure of the longitudinal sub-models.

    trajectory_degree L gives monomial shape functions 1, t, ..., t^L.
    phi transforms the event time before it enters the coefficients.
    Event types enter as J-1 one-hot columns with type J as the reference.
    """

    n_biomarkers: int
    n_covariates: int
    n_event_types: int
    trajectory_degree: int = 1
    phi: str = "identity"
    random_effects: str = "intercept"
    use_type: bool = True
    use_time: bool = True
    use_time_type: bool = True

    def __post_init__(self):
        if self.phi not in ("identity", "log"):
            raise ValueError(f"unknown phi {self.phi!r}")
        if self.random_effects not in ("intercept", "intercept_slope"):
            raise ValueError(f"unknown random effect structure {self.random_effects!r}")
        if self.trajectory_degree < 0:
            raise ValueError("trajectory_degree must be >= 0")

    @staticmethod
    def for_dataset(dataset, **options) -> "LongitudinalSpec":
        return LongitudinalSpec(
            n_biomarkers=dataset.n_biomarkers,
            n_covariates=len(dataset.covariate_names),
            n_event_types=dataset.n_event_types,
            **options,
        )

    @property
    def re_per_biomarker(self) -> int:
        return 1 if self.random_effects == "intercept" else 2

    @property
    def n_random_effects(self) -> int:
        return self.re_per_biomarker * self.n_biomarkers

    def phi_of(self, u):
        if self.phi == "identity":
            return np.asarray(u, dtype=float)
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise NonPositiveTime("log transform requires positive event times")
        return np.log(u)


@dataclass(frozen=True)
class ColumnDef:
    biomarker: int
    part: int       # power of the measurement time
    kind: str       # const | cov | type | phi | phi_type
    index: int = -1  # covariate index (cov) or event type (type/phi_type)

    def name(self, biomarker_names=None, covariate_names=None) -> str:
        b = biomarker_names[self.biomarker] if biomarker_names else f"y{self.biomarker + 1}"
        parts = [str(b), f"g{self.part}"]
        if self.kind == "const":
            parts.append("1")
        elif self.kind == "cov":
            c = covariate_names[self.index] if covariate_names else f"v{self.index + 1}"
            parts.append(str(c))
        elif self.kind == "type":
            parts.append(f"d{self.index}")
        elif self.kind == "phi":
            parts.append("phiT")
        else:
            parts.append(f"phiT.d{self.index}")
        return ":".join(parts)


def design_columns(spec: LongitudinalSpec, lts: bool = False) -> list[ColumnDef]:
    """Ordered column manifest; identical structure across biomarkers."""
    cols = []
    for m in range(spec.n_biomarkers):
        for l in range(spec.trajectory_degree + 1):
            cols.append(ColumnDef(m, l, "const"))
            for c in range(spec.n_covariates):
                cols.append(ColumnDef(m, l, "cov", c))
            if not lts:
                if spec.use_type:
                    for j in range(1, spec.n_event_types):
                        cols.append(ColumnDef(m, l, "type", j))
                if spec.use_time:
                    cols.append(ColumnDef(m, l, "phi"))
                if spec.use_time_type:
                    for j in range(1, spec.n_event_types):
                        cols.append(ColumnDef(m, l, "phi_type", j))
    return cols


def column_names(spec: LongitudinalSpec, lts: bool = False,
                 biomarker_names=None, covariate_names=None) -> tuple[str, ...]:
    return tuple(c.name(biomarker_names, covariate_names) for c in design_columns(spec, lts))


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

def stack_measurements(measurements) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-biomarker series biomarker-major into (times, biom, values)."""
    times, biom, values = [], [], []
    for m, (t, v) in enumerate(measurements):
        times.append(np.asarray(t, dtype=float))
        biom.append(np.full(len(t), m, dtype=int))
        values.append(np.asarray(v, dtype=float))
    if not times:
        return np.zeros(0), np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(times), np.concatenate(biom), np.concatenate(values)


def random_effect_design(spec: LongitudinalSpec, times, biom) -> np.ndarray:
    """Z matrix: per-biomarker random intercept (and slope) blocks."""
    times = np.asarray(times, dtype=float)
    biom = np.asarray(biom, dtype=int)
    r = spec.re_per_biomarker
    Z = np.zeros((times.size, spec.n_random_effects))
    rows = np.arange(times.size)
    Z[rows, r * biom] = 1.0
    if r == 2:
        Z[rows, r * biom + 1] = times
    return Z


def _factor_values(col: ColumnDef, V, phi_t: float, d: int) -> float:
    if col.kind == "const":
        return 1.0
    if col.kind == "cov":
        return float(V[col.index])
    if col.kind == "type":
        return 1.0 if d == col.index else 0.0
    if col.kind == "phi":
        return phi_t
    return phi_t if d == col.index else 0.0


def build_design(
    spec: LongitudinalSpec,
    times,
    biom,
    V,
    event_time: float | None = None,
    event_type: int | None = None,
    lts: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed- and random-effect design matrices for one subject's rows.

    Row r of X holds t^l times the coefficient factors for biomarker
    biom[r]; all other biomarker blocks are zero.  For the LTS design the
    event time and type are ignored.
    """
    times = np.asarray(times, dtype=float)
    biom = np.asarray(biom, dtype=int)
    V = np.asarray(V, dtype=float).ravel()
    cols = design_columns(spec, lts=lts)
    phi_t = 0.0 if lts else float(spec.phi_of(event_time))
    d = 0 if lts else int(event_type)
    powers = np.vander(times, spec.trajectory_degree + 1, increasing=True)
    X = np.zeros((times.size, len(cols)))
    for k, col in enumerate(cols):
        val = _factor_values(col, V, phi_t, d)
        if val == 0.0:
            continue
        mask = biom == col.biomarker
        X[mask, k] = powers[mask, col.part] * val
    return X, random_effect_design(spec, times, biom)


def design_parts(spec: LongitudinalSpec, times, biom, V):
    """Affine decomposition X(u, j) = X0[j] + phi(u) * X1[j] per event type.

    Valid because the event time enters the coefficient structure only
    through phi(u) and phi(u) * one-hot(type).  Returned lists are indexed
    by event type j - 1.
    """
    times = np.asarray(times, dtype=float)
    biom = np.asarray(biom, dtype=int)
    V = np.asarray(V, dtype=float).ravel()
    cols = design_columns(spec, lts=False)
    powers = np.vander(times, spec.trajectory_degree + 1, increasing=True)
    X0, X1 = [], []
    for j in range(1, spec.n_event_types + 1):
        x0 = np.zeros((times.size, len(cols)))
        x1 = np.zeros((times.size, len(cols)))
        for k, col in enumerate(cols):
            mask = biom == col.biomarker
            base = powers[mask, col.part]
            if col.kind == "const":
                x0[mask, k] = base
            elif col.kind == "cov":
                x0[mask, k] = base * V[col.index]
            elif col.kind == "type":
                if j == col.index:
                    x0[mask, k] = base
            elif col.kind == "phi":
                x1[mask, k] = base
            elif col.kind == "phi_type":
                if j == col.index:
                    x1[mask, k] = base
        X0.append(x0)
        X1.append(x1)
    return X0, X1


# ---------------------------------------------------------------------------
# Fitted sub-models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtsFit:
    """Fitted long-term-survivor model (covariate-only coefficients)."""

    coef: np.ndarray
    omega: np.ndarray
    sigma2: np.ndarray
    column_names: tuple[str, ...]


@dataclass(frozen=True)
class LongitudinalFit:
    """Fitted conditional longitudinal model (plus LTS part when two-part)."""

    coef: np.ndarray
    omega: np.ndarray
    sigma2: np.ndarray
    column_names: tuple[str, ...]
    lts: LtsFit | None = None

    def with_coef(self, coef, lts_coef=None) -> "LongitudinalFit":
        lts = self.lts
        if lts_coef is not None and lts is not None:
            lts = replace(lts, coef=np.asarray(lts_coef, dtype=float))
        return replace(self, coef=np.asarray(coef, dtype=float), lts=lts)


def subject_covariance(spec: LongitudinalSpec, omega, sigma2, times, biom) -> np.ndarray:
    """Marginal covariance Z Omega Z' + diag(sigma2 by biomarker row)."""
    Z = random_effect_design(spec, times, biom)
    sig = np.asarray(sigma2, dtype=float)[np.asarray(biom, dtype=int)]
    return Z @ np.asarray(omega) @ Z.T + np.diag(sig)


def marginal_moments(
    spec: LongitudinalSpec,
    fit: LongitudinalFit,
    times,
    biom,
    V,
    event_time: float,
    event_type: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the stacked measurements given (T, D, V)."""
    X, _ = build_design(spec, times, biom, V, event_time, event_type)
    mean = X @ fit.coef
    cov = subject_covariance(spec, fit.omega, fit.sigma2, times, biom)
    return mean, cov


def loglik_given_event(spec, fit: LongitudinalFit, subject, u: float, j: int) -> float:
    """log P(Y | T = u, D = j, V); zero when the subject has no measurements.

    subject may be a Subject or a History (anything with .measurements and
    .covariates).
    """
    times, biom, values = stack_measurements(subject.measurements)
    if times.size == 0:
        return 0.0
    mean, cov = marginal_moments(spec, fit, times, biom, subject.covariates, u, j)
    return mvn_logpdf(values, mean, cov)


def loglik_lts(spec, lts: LtsFit, subject) -> float:
    """log P(Y | T > tau_max, V) under the LTS model; zero when empty."""
    times, biom, values = stack_measurements(subject.measurements)
    if times.size == 0:
        return 0.0
    X, _ = build_design(spec, times, biom, subject.covariates, lts=True)
    mean = X @ lts.coef
    cov = subject_covariance(spec, lts.omega, lts.sigma2, times, biom)
    return mvn_logpdf(values, mean, cov)


# ---------------------------------------------------------------------------
# Weighted GLS coefficient update
# ---------------------------------------------------------------------------

def weighted_coef_update(spec, pseudo_obs, omega, sigma2, lts: bool = False) -> np.ndarray:
    """Closed-form solution of the weighted Gaussian normal equations.

    pseudo_obs yields (times, biom, values, V, event_time, event_type,
    weight) tuples; with lts=True the event entries are ignored.  The
    covariances are held fixed, so the stationarity conditions reduce to
    one generalized least squares solve.
    """
    P = len(design_columns(spec, lts=lts))
    ata = np.zeros((P, P))
    atb = np.zeros(P)
    for times, biom, values, V, u, j, w in pseudo_obs:
        times = np.asarray(times, dtype=float)
        if times.size == 0 or w == 0.0:
            continue
        X, _ = build_design(spec, times, biom, V, u, j, lts=lts)
        cov = subject_covariance(spec, omega, sigma2, times, biom)
        chol = chol_psd(cov)
        Xs = scipy.linalg.solve_triangular(chol, X, lower=True)
        ys = scipy.linalg.solve_triangular(chol, np.asarray(values, dtype=float), lower=True)
        ata += w * (Xs.T @ Xs)
        atb += w * (Xs.T @ ys)
    return solve_normal_equations(ata, atb)


def solve_normal_equations(ata: np.ndarray, atb: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(ata)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise RankDeficientDesign(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(np.diag(c))) or np.min(np.abs(np.diag(c))) < 1e-10 * np.max(np.abs(np.diag(c))):
        raise RankDeficientDesign("design is numerically rank deficient")
    return scipy.linalg.cho_solve((c, low), atb)


# ---------------------------------------------------------------------------
# Maximum likelihood for (coef, omega, sigma2)  [used by the CCA]
# ---------------------------------------------------------------------------

class StackedLMM:
    """Stacked design over subjects with per-subject row offsets.

    Likelihood evaluations use the Woodbury identity against the
    low-dimensional random-effect block, so every subject-level quantity
    reduces to segment sums over rows followed by batched q x q algebra.
    """

    def __init__(self, X, y, Z, biom, subj_ptr, n_biomarkers):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        self.biom = np.asarray(biom, dtype=int)
        self.subj_ptr = np.asarray(subj_ptr, dtype=int)
        self.M = n_biomarkers
        self.n_subjects = len(subj_ptr) - 1
        self.N, self.P = self.X.shape
        self.q = self.Z.shape[1]
        self.row_subj = np.repeat(np.arange(self.n_subjects), np.diff(self.subj_ptr))
        self._starts = self.subj_ptr[:-1]

    @staticmethod
    def from_subjects(spec: LongitudinalSpec, entries, lts: bool = False) -> "StackedLMM | None":
        """entries: iterable of (times, biom, values, V, event_time, event_type)."""
        Xs, ys, Zs, bs, ptr = [], [], [], [], [0]
        count = 0
        for times, biom, values, V, u, j in entries:
            times = np.asarray(times, dtype=float)
            if times.size == 0:
                continue
            X, Z = build_design(spec, times, biom, V, u, j, lts=lts)
            Xs.append(X)
            ys.append(np.asarray(values, dtype=float))
            Zs.append(Z)
            bs.append(np.asarray(biom, dtype=int))
            count += times.size
            ptr.append(count)
        if not Xs:
            return None
        return StackedLMM(
            np.vstack(Xs), np.concatenate(ys), np.vstack(Zs), np.concatenate(bs),
            np.array(ptr), spec.n_biomarkers,
        )

    def _segsum(self, arr):
        """Sum rows of arr within each subject segment."""
        return np.add.reduceat(arr, self._starts, axis=0)

    def profile_eval(self, omega, sigma2, want_grad: bool = False):
        """Profile log-likelihood at the GLS coefficients for fixed variances.

        Returns (loglik, beta) or (loglik, beta, grad_pieces) where
        grad_pieces = (Ksum, Vsum, tr_rows, qd_rows) feed the analytic
        gradient with respect to the variance parameters.
        """
        X, y, Z, biom = self.X, self.y, self.Z, self.biom
        sig_rows = np.asarray(sigma2, dtype=float)[biom]
        winv = 1.0 / sig_rows
        omega = np.asarray(omega, dtype=float)
        chol_om = chol_psd(omega)
        om_inv = scipy.linalg.cho_solve((chol_om, True), np.eye(self.q))
        logdet_om = 2.0 * np.sum(np.log(np.diag(chol_om)))

        Zw = Z * winv[:, None]
        C = self._segsum(np.einsum("np,nq->npq", Zw, Z))
        A = om_inv[None, :, :] + C
        Ainv = np.linalg.inv(A)
        sign, logdetA = np.linalg.slogdet(A)
        if np.any(sign <= 0):
            raise RankDeficientDesign("random-effect information not positive definite")

        Xw = X * winv[:, None]
        XtDX = Xw.T @ X
        G = self._segsum(np.einsum("np,nq->npq", Xw, Z))
        u_y = self._segsum(Zw * y[:, None])
        XtSX = XtDX - np.einsum("ipq,iqr,isr->ps", G, Ainv, G)
        XtSy = Xw.T @ y - np.einsum("ipq,iqr,ir->p", G, Ainv, u_y)
        beta = solve_normal_equations(XtSX, XtSy)

        r = y - X @ beta
        u_r = self._segsum(Zw * r[:, None])
        au = np.einsum("iqr,ir->iq", Ainv, u_r)
        quad = float(r @ (r * winv) - np.einsum("iq,iq->", u_r, au))
        logdet_total = float(np.sum(np.log(sig_rows)) + self.n_subjects * logdet_om
                             + np.sum(logdetA))
        ll = -0.5 * (self.N * _LOG_2PI + logdet_total + quad)
        if not want_grad:
            return ll, beta

        # pieces for d ll / d(variance parameters), envelope at beta-hat
        CA = np.einsum("ipq,iqr->ipr", C, Ainv)
        Ksum = (C - np.einsum("ipq,iqr->ipr", CA, C)).sum(axis=0)
        v = u_r - np.einsum("ipq,iq->ip", C, au)
        Vsum = np.einsum("ip,iq->pq", v, v)
        # per-row diag(Sigma^-1) and (Sigma^-1 r) entries
        Ainv_rows = Ainv[self.row_subj]
        zaz = np.einsum("nq,nqr,nr->n", Z, Ainv_rows, Z)
        diag_sinv = winv - zaz * winv ** 2
        au_rows = au[self.row_subj]
        sinv_r = (r - np.einsum("nq,nq->n", Z, au_rows)) * winv
        tr_rows = diag_sinv
        qd_rows = sinv_r ** 2
        return ll, beta, (Ksum, Vsum, tr_rows, qd_rows)


def _theta_split(theta, q, M):
    n_l = q * (q + 1) // 2
    return theta[:n_l], theta[n_l:n_l + M]


def _omega_from_logchol(lvec, q):
    L = np.zeros((q, q))
    idx = 0
    for i in range(q):
        for jj in range(i + 1):
            L[i, jj] = np.exp(lvec[idx]) if i == jj else lvec[idx]
            idx += 1
    return L @ L.T, L


def _logchol_from_omega(omega, q):
    L = chol_psd(np.asarray(omega, dtype=float))
    out = []
    for i in range(q):
        for jj in range(i + 1):
            out.append(np.log(L[i, jj]) if i == jj else L[i, jj])
    return np.array(out)


def fit_lmm_ml(
    stacked: StackedLMM,
    init_omega=None,
    init_sigma2=None,
    gtol: float = 1e-3,
    max_iter: int = 200,
):
    """Maximum likelihood for the multivariate linear mixed model.

    Coefficients are profiled out in closed form; the variance parameters
    (log-Cholesky of Omega, log residual variances) are maximized with the
    damped-Newton kernel using the analytic profile score and a
    finite-difference Hessian of that score.
    """
    q, M = stacked.q, stacked.M
    if init_omega is None or init_sigma2 is None:
        init_omega, init_sigma2 = _moment_init(stacked)
    theta0 = np.concatenate([
        _logchol_from_omega(init_omega, q),
        np.log(np.maximum(np.asarray(init_sigma2, dtype=float), 1e-6)),
    ])

    def unpack(theta):
        lvec, svec = _theta_split(theta, q, M)
        omega, L = _omega_from_logchol(lvec, q)
        return omega, L, np.exp(svec)

    def value(theta):
        omega, _, sigma2 = unpack(theta)
        try:
            ll, _ = stacked.profile_eval(omega, sigma2)
        except (RankDeficientDesign, np.linalg.LinAlgError):
            return -np.inf
        return ll

    def grad(theta):
        omega, L, sigma2 = unpack(theta)
        _, _, (Ksum, Vsum, tr_rows, qd_rows) = stacked.profile_eval(omega, sigma2, want_grad=True)
        dl_dL = -(Ksum - Vsum) @ L
        g_l = []
        for i in range(q):
            for jj in range(i + 1):
                g = dl_dL[i, jj]
                if i == jj:
                    g *= L[i, i]  # chain rule through the log diagonal
                g_l.append(g)
        g_s = np.zeros(M)
        for m in range(M):
            mask = stacked.biom == m
            tr_m = sigma2[m] * tr_rows[mask].sum()
            qd_m = sigma2[m] * qd_rows[mask].sum()
            g_s[m] = -0.5 * (tr_m - qd_m)
        return np.concatenate([np.array(g_l), g_s])

    def objective(theta):
        f = value(theta)
        g = grad(theta)
        n = theta.size
        h = np.zeros((n, n))
        for k in range(n):
            hk = 1e-5 * max(1.0, abs(theta[k]))
            e = np.zeros(n)
            e[k] = hk
            h[:, k] = (grad(theta + e) - g) / hk
        return f, g, 0.5 * (h + h.T)

    from .numerics import maximize

    theta = maximize(objective, theta0, tol=gtol, max_iter=max_iter, value_fn=value)
    omega, _, sigma2 = unpack(theta)
    ll, beta = stacked.profile_eval(omega, sigma2)
    return beta, omega, sigma2, ll


def _moment_init(stacked: StackedLMM):
    """Crude moment starting values: OLS residual split into between and within."""
    beta, *_ = np.linalg.lstsq(stacked.X, stacked.y, rcond=None)
    resid = stacked.y - stacked.X @ beta
    q, M = stacked.q, stacked.M
    r = q // M
    omega = np.eye(q) * 0.5
    sigma2 = np.full(M, 0.5)
    for m in range(M):
        mask = stacked.biom == m
        if not mask.any():
            continue
        subj = stacked.row_subj[mask]
        res_m = resid[mask]
        order = np.argsort(subj, kind="mergesort")
        subj_sorted, res_sorted = subj[order], res_m[order]
        starts = np.r_[0, np.nonzero(np.diff(subj_sorted))[0] + 1]
        counts = np.diff(np.r_[starts, len(subj_sorted)])
        means = np.add.reduceat(res_sorted, starts) / counts
        within = res_sorted - np.repeat(means, counts)
        n_w = max(len(within) - len(means), 1)
        sigma2[m] = max(float(within @ within / n_w), 1e-3)
        if len(means) > 1:
            omega[m * r, m * r] = max(float(np.var(means, ddof=1)), 1e-3)
    return omega, sigma2
