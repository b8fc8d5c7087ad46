"""Random-intercept linear mixed model fit by REML.

The model is y_i = x_i' beta + u_{g(i)} + e_i with u_g ~ N(0, tau2) and
e_i ~ N(0, sigma2), one random intercept per group. Everything is profiled
down to a single free parameter theta = log(tau2/sigma2): beta and sigma2
have closed forms given the variance ratio, and the grouped structure lets
all matrix products be assembled from per-group sums (Sherman-Morrison on
each block), so cost is O(n p + G p^2) per criterion evaluation.

The restricted likelihood is maximized over theta with L-BFGS-B; the
analytic gradient below is the exact total derivative of the profiled
criterion (envelope terms for beta and sigma2 vanish at their optima).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import RankDeficientDesign, SingularGroupStructure, TooFewClusters

# Bounds on theta = log(tau2/sigma2). exp(-30) ~ 1e-13 is numerically zero
# relative to any sane variance scale; hitting the lower bound is reported
# as the tau2 = 0 boundary.
_THETA_LO = -30.0
_THETA_HI = 30.0
_SIGMA2_FLOOR = 1e-12

# 97.5% normal quantile pinned for confidence intervals.
Z_975 = 1.959964


@dataclass
class LmmProblem:
    """Modeling data: outcome vector, design matrix, and group codes.

    ``groups`` may hold arbitrary hashable labels; they are recoded
    internally, so fits are invariant to relabeling.
    """

    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray
    column_names: list[str]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be two-dimensional")
        self.groups = np.asarray(self.groups).ravel()
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.groups.shape[0] != n:
            raise ValueError("y, X, groups must have the same number of rows")
        if len(self.column_names) != self.X.shape[1]:
            raise ValueError("column_names must match X columns")

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_groups(self) -> int:
        return len(set(self.groups.tolist()))


@dataclass
class LmmFit:
    """Fitted model: fixed effects, variance components, inference columns."""

    column_names: list[str]
    beta: np.ndarray
    se_model: np.ndarray
    tau2: float
    sigma2: float
    reml_loglik: float
    n_iter: int
    converged: bool
    boundary: bool
    sigma2_floored: bool
    n_obs: int
    n_groups: int
    se_robust: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    p_values: np.ndarray | None = None
    stars: list[str] = field(default_factory=list)


class _GroupStats:
    """Per-group sufficient statistics for the profiled criterion."""

    def __init__(self, problem: LmmProblem):
        y, X = problem.y, problem.X
        _, codes = np.unique(problem.groups, return_inverse=True)
        self.codes = codes
        self.G = int(codes.max()) + 1 if codes.size else 0
        self.n_g = np.bincount(codes, minlength=self.G).astype(float)
        self.S = np.zeros((self.G, X.shape[1]))
        np.add.at(self.S, codes, X)
        self.t = np.bincount(codes, weights=y, minlength=self.G)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.n = y.shape[0]
        self.p = X.shape[1]


def _criterion(theta: float, st: _GroupStats):
    """Return (-2 restricted loglik up to constant, its d/dtheta).

    Minimized by the optimizer. All pieces follow from W = I + lam Z Z',
    inverted blockwise: W_g^{-1} = I - a_g 11' with a_g = lam/(1 + lam n_g).
    """
    lam = math.exp(theta)
    denom = 1.0 + lam * st.n_g
    c = 1.0 / denom                     # 1'W_g^{-1} = c_g 1'
    a = lam * c

    M = st.XtX - (st.S * a[:, None]).T @ st.S      # X'W^{-1}X
    b = st.Xty - st.S.T @ (a * st.t)               # X'W^{-1}y
    q_yy = st.yty - float(a @ (st.t * st.t))       # y'W^{-1}y

    chol = cho_factor(M, lower=True)
    beta = cho_solve(chol, b)
    Q = q_yy - float(b @ beta)                     # r'W^{-1}r at the GLS beta
    Q = max(Q, 1e-300)

    logdet_W = float(np.sum(np.log1p(lam * st.n_g)))
    logdet_M = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    resid_df = st.n - st.p
    value = resid_df * math.log(Q) + logdet_W + logdet_M

    # d/dlam of each term; beta and the profiled sigma2 contribute nothing
    # at their optima, so these are total derivatives.
    v = st.t - st.S @ beta                         # per-group residual sums
    dQ = -float(np.sum((c * v) ** 2))
    dW = float(np.sum(st.n_g * c))
    U = st.S * c[:, None]                          # rows of Z'W^{-1}X
    dM = -float(np.sum(U * cho_solve(chol, U.T).T))
    dvalue = resid_df * dQ / Q + dW + dM

    return value, lam * dvalue, (lam, beta, Q, M, chol, logdet_W, logdet_M)


def profiled_loglik(problem: LmmProblem, theta: float) -> tuple[float, float]:
    """Profiled restricted log-likelihood at theta, up to an additive
    constant, with its analytic derivative. Exposed for optimizer-free
    inspection of the criterion surface."""
    st = _group_stats_checked(problem)
    value, dvalue, _ = _criterion(theta, st)
    return -0.5 * value, -0.5 * dvalue


def _group_stats_checked(problem: LmmProblem) -> _GroupStats:
    if problem.n_obs == 0:
        raise SingularGroupStructure("no observations")
    if np.linalg.matrix_rank(problem.X) < problem.X.shape[1]:
        raise RankDeficientDesign(
            "design matrix is rank deficient; drop collinear covariates"
        )
    st = _GroupStats(problem)
    if st.n == 1:
        raise SingularGroupStructure("a single observation identifies nothing")
    if np.all(st.n_g == 1):
        raise SingularGroupStructure(
            "every group has one observation; the group variance is "
            "indistinguishable from the residual variance"
        )
    return st


def _finish(st, lam, beta, Q, M, theta, n_iter, converged, boundary):
    resid_df = st.n - st.p
    sigma2 = Q / resid_df
    floored = sigma2 < _SIGMA2_FLOOR
    if floored:
        sigma2 = _SIGMA2_FLOOR
    tau2 = 0.0 if boundary else lam * sigma2

    chol = cho_factor(M, lower=True)
    Minv = cho_solve(chol, np.eye(st.p))
    se_model = np.sqrt(np.maximum(sigma2 * np.diag(Minv), 0.0))

    logdet_W = float(np.sum(np.log1p(lam * st.n_g)))
    logdet_M = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    loglik = -0.5 * (
        resid_df * (math.log(sigma2) + 1.0 + math.log(2.0 * math.pi))
        + logdet_W
        + logdet_M
    )
    return sigma2, tau2, se_model, loglik, floored


def fit_reml(problem: LmmProblem, tol: float = 1e-8, max_iter: int = 500) -> LmmFit:
    """Fit the random-intercept model by REML.

    Maximizes the profiled restricted likelihood over theta = log(tau2/sigma2)
    with L-BFGS-B (memory 10), converging when the projected gradient falls
    below ``tol``. When the exact lam = 0 limit of the criterion is at least
    as good as the optimizer's solution the variance ratio is judged to sit
    at the tau2 = 0 boundary: the fit is recomputed exactly at lam = 0
    (plain least squares) and flagged. Raises RankDeficientDesign or
    SingularGroupStructure for unusable problems; hitting ``max_iter``
    returns a partial fit with ``converged=False`` rather than raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    st = _group_stats_checked(problem)

    if st.G < 2:
        # One group: the random intercept is absorbed by the fixed part,
        # so tau2 sits at the boundary by construction.
        return _boundary_fit(st, problem, n_iter=0)

    def objective(theta_arr):
        value, dvalue, _ = _criterion(float(theta_arr[0]), st)
        return value, np.array([dvalue])

    res = minimize(
        objective,
        x0=np.array([0.0]),
        jac=True,
        method="L-BFGS-B",
        bounds=[(_THETA_LO, _THETA_HI)],
        options={"maxcor": 10, "ftol": 1e-14, "gtol": tol, "maxiter": max_iter},
    )
    theta = float(res.x[0])
    value, dvalue, parts = _criterion(theta, st)
    lam, beta, Q, M, chol, _, _ = parts

    # Boundary adjudication. The gradient in theta vanishes as lam -> 0
    # (chain rule factor lam), so the optimizer can stall on the slope when
    # the restricted likelihood is maximized at tau2 = 0. Evaluate the exact
    # lam = 0 limit of the criterion and take the boundary whenever it is at
    # least as good as the optimizer's point.
    chol0 = cho_factor(st.XtX, lower=True)
    beta0 = cho_solve(chol0, st.Xty)
    Q0 = max(st.yty - float(st.Xty @ beta0), 1e-300)
    value0 = (st.n - st.p) * math.log(Q0) + 2.0 * float(
        np.sum(np.log(np.diag(chol0[0])))
    )
    if value0 <= value + 1e-10 * (1.0 + abs(value0)):
        return _boundary_fit(st, problem, n_iter=int(res.nit))

    converged = abs(dvalue) < tol or bool(res.success)

    sigma2, tau2, se_model, loglik, floored = _finish(
        st, lam, beta, Q, M, theta, int(res.nit), converged, boundary=False
    )
    return LmmFit(
        column_names=list(problem.column_names),
        beta=beta,
        se_model=se_model,
        tau2=tau2,
        sigma2=sigma2,
        reml_loglik=loglik,
        n_iter=int(res.nit),
        converged=converged,
        boundary=False,
        sigma2_floored=floored,
        n_obs=st.n,
        n_groups=st.G,
    )


def _boundary_fit(st: _GroupStats, problem: LmmProblem, n_iter: int) -> LmmFit:
    """Exact fit at lam = 0, where GLS collapses to ordinary least squares."""
    chol = cho_factor(st.XtX, lower=True)
    beta = cho_solve(chol, st.Xty)
    Q = st.yty - float(st.Xty @ beta)
    Q = max(Q, 0.0)
    sigma2, tau2, se_model, loglik, floored = _finish(
        st, 0.0, beta, Q, st.XtX, _THETA_LO, n_iter, True, boundary=True
    )
    return LmmFit(
        column_names=list(problem.column_names),
        beta=beta,
        se_model=se_model,
        tau2=0.0,
        sigma2=sigma2,
        reml_loglik=loglik,
        n_iter=n_iter,
        converged=True,
        boundary=True,
        sigma2_floored=floored,
        n_obs=st.n,
        n_groups=st.G,
    )


def robust_se(problem: LmmProblem, fit: LmmFit) -> np.ndarray:
    """Cluster-robust sandwich standard errors for the GLS fixed effects.

    Clusters are the random-intercept groups; the meat is assembled from
    per-cluster score contributions X_g'W_g^{-1}r_g and scaled by the
    small-sample factor G/(G-1).
    """
    st = _GroupStats(problem)
    if st.G < 2:
        raise TooFewClusters("cluster-robust errors need at least two groups")
    if not fit.converged:
        raise ValueError("robust_se requires a converged fit")

    lam = fit.tau2 / fit.sigma2
    denom = 1.0 + lam * st.n_g
    a = lam / denom

    r = problem.y - problem.X @ fit.beta
    r_sum = np.bincount(st.codes, weights=r, minlength=st.G)
    Xr = np.zeros((st.G, st.p))
    np.add.at(Xr, st.codes, problem.X * r[:, None])
    H = Xr - st.S * (a * r_sum)[:, None]          # rows are X_g'W_g^{-1} r_g

    M = st.XtX - (st.S * a[:, None]).T @ st.S
    bread = cho_solve(cho_factor(M, lower=True), np.eye(st.p))
    meat = H.T @ H
    V = (st.G / (st.G - 1.0)) * bread @ meat @ bread
    return np.sqrt(np.maximum(np.diag(V), 0.0))


@dataclass
class SummaryRow:
    variable: str
    coef: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    stars: str


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def wald_summary(fit: LmmFit) -> list[SummaryRow]:
    """Coefficient table from the robust errors: 95% normal CIs, two-sided
    normal p-values, significance stars. Also caches the inference columns
    onto the fit."""
    if fit.se_robust is None:
        raise ValueError("attach robust standard errors before summarizing")
    se = np.asarray(fit.se_robust, dtype=float)
    beta = fit.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(beta) / se, np.inf)
    p = np.array([math.erfc(zi / math.sqrt(2.0)) if math.isfinite(zi) else 0.0 for zi in z])
    ci_low = beta - Z_975 * se
    ci_high = beta + Z_975 * se
    stars = [significance_stars(pi) for pi in p]

    fit.ci_low, fit.ci_high, fit.p_values, fit.stars = ci_low, ci_high, p, stars
    return [
        SummaryRow(name, float(beta[i]), float(se[i]), float(ci_low[i]),
                   float(ci_high[i]), float(p[i]), stars[i])
        for i, name in enumerate(fit.column_names)
    ]


def problem_from_rows(
    rows: list[dict],
    outcome: str,
    covariates: list[str],
    group_field: str = "subject_category",
) -> tuple[LmmProblem, int]:
    """Assemble an LmmProblem from modeling-row dicts with listwise deletion.

    Rows missing the outcome, the group label, or any requested covariate are
    dropped; the count of dropped rows is returned alongside the problem.
    An intercept column is prepended.
    """
    kept_y, kept_x, kept_g = [], [], []
    dropped = 0
    for row in rows:
        vals = [row.get(c) for c in covariates]
        yv = row.get(outcome)
        gv = row.get(group_field)
        if yv is None or gv in (None, "") or any(v is None for v in vals):
            dropped += 1
            continue
        kept_y.append(float(yv))
        kept_x.append([1.0] + [float(v) for v in vals])
        kept_g.append(gv)
    if not kept_y:
        raise SingularGroupStructure("no complete rows to fit")
    problem = LmmProblem(
        y=np.array(kept_y),
        X=np.array(kept_x),
        groups=np.array(kept_g, dtype=object),
        column_names=["intercept"] + list(covariates),
    )
    return problem, dropped
