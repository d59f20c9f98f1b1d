"""Shared numerical kernels.

Spline basis evaluation, the one-dimensional quadrature grids used to
discretize event-time integrals, multivariate normal log-densities, and a
damped-Newton maximizer used by all parametric sub-model fitters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NoConvergence, NonPositiveDefinite

EX = "ex"
TP = "tp"

DEFAULT_GRID_WIDTH = 0.25
DEFAULT_T_END_EX = 100.0


# ---------------------------------------------------------------------------
# Spline bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplineBasis:
    """A fixed spline basis B(t).

    kind:
        "constant"      a single all-ones column
        "hat"           degree-1 hats, one per knot (partition of unity)
        "natural_cubic" natural cubic basis with columns [1, t, curvature...]

    Values outside the knot span follow the linear extension of the end
    pieces; for the natural cubic family that extension is built into the
    basis itself.
    """

    kind: str
    knots: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("constant", "hat", "natural_cubic"):
            raise ValueError(f"unknown spline kind {self.kind!r}")
        if self.kind != "constant":
            ks = tuple(float(k) for k in self.knots)
            if len(ks) < 2:
                raise ValueError("need at least two knots")
            if any(b <= a for a, b in zip(ks, ks[1:])):
                raise ValueError("knots must be strictly increasing")
            object.__setattr__(self, "knots", ks)

    @property
    def degree(self) -> int:
        return {"constant": 0, "hat": 1, "natural_cubic": 3}[self.kind]

    @property
    def dimension(self) -> int:
        if self.kind == "constant":
            return 1
        return len(self.knots)

    @staticmethod
    def constant() -> "SplineBasis":
        return SplineBasis("constant")

    @staticmethod
    def hat(knots) -> "SplineBasis":
        return SplineBasis("hat", tuple(knots))

    @staticmethod
    def natural_cubic(knots) -> "SplineBasis":
        return SplineBasis("natural_cubic", tuple(knots))

    @staticmethod
    def natural_cubic_from_quantiles(times, probs=(0.25, 0.5, 0.75)) -> "SplineBasis":
        """Natural cubic basis with knots at quantiles of observed event times."""
        knots = np.unique(np.quantile(np.asarray(times, dtype=float), probs))
        if len(knots) < 2:
            # all event times identical: fall back to [1, t]
            knots = np.array([knots[0], knots[0] + 1.0])
        return SplineBasis("natural_cubic", tuple(knots))


def eval_spline_many(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate B(t) for an array of times; returns (len(t), dimension)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if basis.kind == "constant":
        return np.ones((t.size, 1))
    knots = np.asarray(basis.knots)
    if basis.kind == "hat":
        out = np.zeros((t.size, len(knots)))
        # clip to the end segments so out-of-span points extend linearly
        seg = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 2)
        a, b = knots[seg], knots[seg + 1]
        frac = (t - a) / (b - a)
        rows = np.arange(t.size)
        out[rows, seg] = 1.0 - frac
        out[rows, seg + 1] = frac
        return out
    # natural cubic: N_1 = 1, N_2 = t, N_{k+2} = d_k - d_{K-1},
    # d_k(t) = [(t-xi_k)_+^3 - (t-xi_K)_+^3] / (xi_K - xi_k).
    # Linear beyond the boundary knots by construction.
    K = len(knots)
    out = np.ones((t.size, K))
    out[:, 1] = t
    if K > 2:
        def trunc3(x):
            return np.clip(x, 0.0, None) ** 3

        last = knots[-1]
        d_last = (trunc3(t[:, None] - knots[-2]) - trunc3(t[:, None] - last)) / (
            last - knots[-2]
        )
        for k in range(K - 2):
            d_k = (trunc3(t[:, None] - knots[k]) - trunc3(t[:, None] - last)) / (
                last - knots[k]
            )
            out[:, k + 2] = (d_k - d_last)[:, 0]
    return out


def eval_spline(basis: SplineBasis, t: float) -> np.ndarray:
    """B(t) as a vector of length basis.dimension."""
    return eval_spline_many(basis, [t])[0]


# ---------------------------------------------------------------------------
# Quadrature grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureGrid:
    """Connected intervals [a_k, b_k) starting at a subject's observed time.

    With the two-part variant the final interval is the unbounded tail
    [tau_max, inf) and is flagged; its midpoint is undefined (NaN).
    """

    edges: np.ndarray  # length K+1, edges[-1] may be inf
    has_tail: bool

    @property
    def n_intervals(self) -> int:
        return len(self.edges) - 1

    @property
    def lowers(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def uppers(self) -> np.ndarray:
        return self.edges[1:]

    @property
    def midpoints(self) -> np.ndarray:
        mid = 0.5 * (self.edges[:-1] + self.edges[1:])
        if self.has_tail:
            mid = mid.copy()
            mid[-1] = np.nan
        return mid

    @property
    def is_tail_interval(self) -> np.ndarray:
        flags = np.zeros(self.n_intervals, dtype=bool)
        if self.has_tail:
            flags[-1] = True
        return flags


def _equal_edges(start: float, end: float, width: float) -> np.ndarray:
    n_full = int(np.floor((end - start) / width + 1e-12))
    edges = start + width * np.arange(n_full + 1)
    if edges[-1] < end - 1e-12:
        edges = np.append(edges, end)
    else:
        edges[-1] = end
    return edges


def build_grid(
    t_start: float,
    tau_max: float | None,
    width: float,
    variant: str,
    t_end_ex: float = DEFAULT_T_END_EX,
) -> QuadratureGrid:
    """Build the event-time quadrature grid starting from t_start.

    EX: equal-width intervals from t_start to t_end_ex (last may be
    shorter).  TP: equal-width intervals from t_start to tau_max followed
    by the tail [tau_max, inf).  Degenerate starts past the end produce a
    single-interval grid.
    """
    if width <= 0:
        raise ValueError("width must be positive")
    if t_start < 0:
        raise ValueError("t_start must be nonnegative")
    if variant == EX:
        if t_start >= t_end_ex:
            edges = np.array([t_start, t_start + width])
            return QuadratureGrid(edges=edges, has_tail=False)
        return QuadratureGrid(edges=_equal_edges(t_start, t_end_ex, width), has_tail=False)
    if variant == TP:
        if tau_max is None:
            raise ValueError("tau_max required for the two-part variant")
        if t_start >= tau_max:
            edges = np.array([t_start, np.inf])
            return QuadratureGrid(edges=edges, has_tail=True)
        edges = np.append(_equal_edges(t_start, tau_max, width), np.inf)
        return QuadratureGrid(edges=edges, has_tail=True)
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Gaussian density
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def chol_psd(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises NonPositiveDefinite on failure."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite(str(exc)) from exc


def mvn_logpdf(y, mean, cov) -> float:
    """Exact multivariate normal log-density via Cholesky factorization."""
    y = np.asarray(y, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    if y.shape != mean.shape or cov.shape != (y.size, y.size):
        raise ValueError("dimension mismatch")
    chol = chol_psd(cov)
    w = scipy.linalg.solve_triangular(chol, y - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (y.size * _LOG_2PI + logdet + w @ w))


# ---------------------------------------------------------------------------
# Damped Newton maximizer
# ---------------------------------------------------------------------------

def maximize(
    objective,
    init,
    tol: float = 1e-8,
    max_iter: int = 200,
    value_fn=None,
) -> np.ndarray:
    """Maximize a twice-differentiable objective by damped Newton ascent.

    `objective(x)` must return (value, gradient, hessian).  When the
    Hessian is not negative definite the step falls back to gradient
    ascent with backtracking.  `value_fn` may supply a cheaper
    value-only evaluation for the line search.  Returns a point with
    gradient norm below tol; raises NoConvergence otherwise.
    """
    x = np.asarray(init, dtype=float).copy()
    if value_fn is None:
        def value_fn(z):
            return objective(z)[0]
    for _ in range(max_iter):
        f, g, h = objective(x)
        if not np.all(np.isfinite(g)):
            raise NoConvergence("non-finite gradient")
        if np.linalg.norm(g) < tol:
            return x
        step = None
        try:
            # Newton direction is ascent when -H is positive definite
            c = np.linalg.cholesky(-np.asarray(h, dtype=float))
            step = scipy.linalg.cho_solve((c, True), g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or step @ g <= 0:
            step = g / max(np.linalg.norm(g), 1.0)
        # backtracking line search with step halving
        t = 1.0
        improved = False
        for _ in range(60):
            trial = x + t * step
            ft = value_fn(trial)
            if np.isfinite(ft) and ft > f + 1e-4 * t * (g @ step):
                x = trial
                improved = True
                break
            t *= 0.5
        if not improved:
            # flat to machine precision counts as converged at loose scale
            if np.linalg.norm(g) < max(tol, 1e-6 * (1.0 + abs(f))):
                return x
            raise NoConvergence("line search failed to improve the objective")
    f, g, _ = objective(x)
    if np.linalg.norm(g) < tol:
        return x
    raise NoConvergence(f"gradient norm {np.linalg.norm(g):.3g} after {max_iter} iterations")


def numeric_gradient(f, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient; used for oracles and wrapped objectives."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def numeric_hessian_from_grad(grad_fn, x, step: float = 1e-5) -> np.ndarray:
    """Symmetrized forward-difference Hessian from a gradient function."""
    x = np.asarray(x, dtype=float)
    g0 = grad_fn(x)
    n = x.size
    h = np.zeros((n, n))
    for k in range(n):
        hk = step * max(1.0, abs(x[k]))
        e = np.zeros(n)
        e[k] = hk
        h[:, k] = (grad_fn(x + e) - g0) / hk
    return 0.5 * (h + h.T)


def with_numeric_derivatives(f, grad_step: float = 1e-6, hess_step: float = 1e-4):
    """Wrap a scalar function into a (value, gradient, hessian) objective."""

    def objective(x):
        val = f(x)
        g = numeric_gradient(f, x, grad_step)
        h = numeric_hessian_from_grad(lambda z: numeric_gradient(f, z, grad_step), x, hess_step)
        return val, g, h

    return objective
