"""Random-intercept REML fit against independent closed-form oracles."""

import math

import numpy as np
import pytest

from jimpact.errors import (
    RankDeficientDesign,
    SingularGroupStructure,
    TooFewClusters,
)
from jimpact.lmm import (
    LmmFit,
    LmmProblem,
    Z_975,
    fit_reml,
    problem_from_rows,
    profiled_loglik,
    robust_se,
    significance_stars,
    wald_summary,
)


def anova_oracle(y, groups, m):
    """Balanced one-way ANOVA estimator, the textbook REML match.

    sigma2 = MS_within; tau2 = max(0, (MS_between - MS_within) / m) for
    common group size m. Computed from scratch, no shared code with the
    fitter.
    """
    labels = np.unique(groups)
    k = len(labels)
    n = len(y)
    grand = y.mean()
    means = np.array([y[groups == lab].mean() for lab in labels])
    ss_b = m * np.sum((means - grand) ** 2)
    ss_w = sum(np.sum((y[groups == lab] - means[i]) ** 2)
               for i, lab in enumerate(labels))
    ms_b = ss_b / (k - 1)
    ms_w = ss_w / (n - k)
    return max(0.0, (ms_b - ms_w) / m), ms_w


def balanced_problem(seed, k, m, tau2, sigma2):
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(k), m)
    u = rng.normal(0.0, math.sqrt(tau2), k)
    y = 2.0 + u[groups] + rng.normal(0.0, math.sqrt(sigma2), k * m)
    X = np.ones((k * m, 1))
    return LmmProblem(y=y, X=X, groups=groups, column_names=["intercept"]), y, groups


def test_matches_balanced_anova_closed_form():
    # Variance draws bounded away from zero keep the moment solution
    # interior, where the classical REML/ANOVA equivalence holds exactly.
    for seed in range(8):
        rng = np.random.default_rng(1000 + seed)
        k = int(rng.integers(3, 20))
        m = int(rng.integers(2, 30))
        tau2 = float(rng.uniform(0.5, 2.0))
        sigma2 = float(rng.uniform(0.5, 2.0))
        prob, y, groups = balanced_problem(seed, k, m, tau2, sigma2)
        fit = fit_reml(prob)
        tau2_hat, sigma2_hat = anova_oracle(y, groups, m)
        assert fit.tau2 == pytest.approx(tau2_hat, abs=1e-6)
        assert fit.sigma2 == pytest.approx(sigma2_hat, abs=1e-6)
        assert fit.converged


def test_truncated_anova_case_refits_sigma2_under_constraint():
    # When MS_between < MS_within the unconstrained moment solution is
    # negative; the constrained optimum sits at tau2 = 0 and sigma2 becomes
    # the plain iid residual variance RSS/(n-1), not MS_within.
    prob, y, groups = balanced_problem(1, k=18, m=19, tau2=0.0, sigma2=1.0)
    fit = fit_reml(prob)
    tau2_hat, _ = anova_oracle(y, groups, 19)
    assert tau2_hat == 0.0
    assert fit.boundary and fit.tau2 == 0.0
    rss = float(np.sum((y - y.mean()) ** 2))
    assert fit.sigma2 == pytest.approx(rss / (len(y) - 1), rel=1e-12)


def test_boundary_collapse_recovers_ols_exactly():
    # Data generated with tau2 = 0; seed chosen so the criterion is
    # maximized at the boundary. The fit must then be plain least squares.
    rng = np.random.default_rng(0)
    n, p, G = 120, 3, 8
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    g = rng.integers(0, G, n)
    y = X @ np.array([1.0, -0.5, 2.0]) + rng.normal(0.0, 1.0, n)
    fit = fit_reml(LmmProblem(y=y, X=X, groups=g, column_names=list("abc")))
    assert fit.boundary
    assert fit.tau2 == 0.0
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(fit.beta, ols, rtol=0, atol=1e-8)


def test_analytic_gradient_matches_central_differences():
    worst = 0.0
    for fseed in range(3):
        rng = np.random.default_rng(100 + fseed)
        n, G = 150, 12
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        g = rng.integers(0, G, n)
        u = rng.normal(0.0, 0.7, G)
        y = X @ np.array([0.5, 1.0, -1.0]) + u[g] + rng.normal(0.0, 1.0, n)
        prob = LmmProblem(y=y, X=X, groups=g, column_names=list("abc"))
        for theta in rng.uniform(-3, 3, 6):
            _, grad = profiled_loglik(prob, float(theta))
            h = 1e-5 * max(1.0, abs(theta))
            fp, _ = profiled_loglik(prob, float(theta) + h)
            fm, _ = profiled_loglik(prob, float(theta) - h)
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(grad - fd) / max(abs(grad), abs(fd)))
    assert worst < 1e-5


def test_fitted_theta_beats_probe_grid():
    rng = np.random.default_rng(7)
    n, G = 200, 10
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    g = rng.integers(0, G, n)
    u = rng.normal(0.0, 1.0, G)
    y = X @ np.array([1.0, -0.5, 2.0]) + u[g] + rng.normal(0.0, 1.0, n)
    prob = LmmProblem(y=y, X=X, groups=g, column_names=list("abc"))
    fit = fit_reml(prob)
    assert not fit.boundary
    theta_hat = math.log(fit.tau2 / fit.sigma2)
    ll_hat, _ = profiled_loglik(prob, theta_hat)
    for theta in np.linspace(-8, 8, 33):
        ll, _ = profiled_loglik(prob, float(theta))
        assert ll <= ll_hat + 1e-9


def test_recovers_known_coefficients():
    rng = np.random.default_rng(42)
    n, G = 200, 10
    beta_true = np.array([1.0, -0.5, 2.0])
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    g = rng.integers(0, G, n)
    u = rng.normal(0.0, 1.0, G)
    y = X @ beta_true + u[g] + rng.normal(0.0, 1.0, n)
    prob = LmmProblem(y=y, X=X, groups=g, column_names=["intercept", "x1", "x2"])
    fit = fit_reml(prob)
    fit.se_robust = robust_se(prob, fit)
    assert fit.converged
    assert np.all(np.abs(fit.beta - beta_true) <= 3.0 * fit.se_robust)


def dense_sandwich(y, X, g, fit):
    """Brute-force cluster sandwich via explicit n-by-n algebra."""
    lam = fit.tau2 / fit.sigma2
    labels = np.unique(g)
    Z = (g[:, None] == labels[None, :]).astype(float)
    Winv = np.linalg.inv(np.eye(len(y)) + lam * Z @ Z.T)
    M = X.T @ Winv @ X
    bread = np.linalg.inv(M)
    r = y - X @ fit.beta
    meat = np.zeros((X.shape[1], X.shape[1]))
    for lab in labels:
        idx = g == lab
        h = X[idx].T @ Winv[np.ix_(idx, idx)] @ r[idx]
        meat += np.outer(h, h)
    G = len(labels)
    V = (G / (G - 1.0)) * bread @ meat @ bread
    return np.sqrt(np.diag(V))


def test_robust_se_matches_dense_reference():
    rng = np.random.default_rng(3)
    n, G = 18, 3
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    g = np.repeat(np.arange(G), n // G)
    u = rng.normal(0.0, 1.0, G)
    y = X @ np.array([0.5, 1.5]) + u[g] + rng.normal(0.0, 0.8, n)
    prob = LmmProblem(y=y, X=X, groups=g, column_names=["intercept", "x"])
    fit = fit_reml(prob)
    se = robust_se(prob, fit)
    np.testing.assert_allclose(se, dense_sandwich(y, X, g, fit), rtol=1e-10)


def test_group_relabeling_changes_nothing():
    rng = np.random.default_rng(11)
    n, G = 90, 6
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    g = rng.integers(0, G, n)
    u = rng.normal(0.0, 0.9, G)
    y = X @ np.array([0.3, -1.2]) + u[g] + rng.normal(0.0, 1.0, n)
    names = ["intercept", "x"]
    fit_a = fit_reml(LmmProblem(y=y, X=X, groups=g, column_names=names))
    relabeled = np.array([f"cat-{9 - gi}" for gi in g], dtype=object)
    fit_b = fit_reml(LmmProblem(y=y, X=X, groups=relabeled, column_names=names))
    # Relabeling reorders the per-group sums, so agreement is to float
    # accumulation noise, not bitwise.
    np.testing.assert_allclose(fit_a.beta, fit_b.beta, rtol=0, atol=1e-8)
    assert fit_a.tau2 == pytest.approx(fit_b.tau2, rel=1e-5)


def test_all_singleton_groups_rejected():
    y = np.arange(5.0)
    X = np.ones((5, 1))
    g = np.arange(5)
    with pytest.raises(SingularGroupStructure):
        fit_reml(LmmProblem(y=y, X=X, groups=g, column_names=["intercept"]))


def test_rank_deficient_design_rejected():
    rng = np.random.default_rng(1)
    x = rng.normal(size=20)
    X = np.column_stack([np.ones(20), x, 2.0 * x])
    y = rng.normal(size=20)
    g = np.repeat(np.arange(4), 5)
    with pytest.raises(RankDeficientDesign):
        fit_reml(LmmProblem(y=y, X=X, groups=g, column_names=list("abc")))


def test_single_group_fits_at_boundary():
    rng = np.random.default_rng(2)
    n = 30
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ np.array([1.0, 0.5]) + rng.normal(size=n)
    g = np.zeros(n, dtype=int)
    prob = LmmProblem(y=y, X=X, groups=g, column_names=["intercept", "x"])
    fit = fit_reml(prob)
    assert fit.boundary and fit.tau2 == 0.0
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(fit.beta, ols, atol=1e-10)
    with pytest.raises(TooFewClusters):
        robust_se(prob, fit)


def test_significance_star_thresholds():
    assert significance_stars(0.0009) == "***"
    assert significance_stars(0.001) == "**"
    assert significance_stars(0.009) == "**"
    assert significance_stars(0.01) == "*"
    assert significance_stars(0.049) == "*"
    assert significance_stars(0.05) == ""
    assert significance_stars(0.9) == ""


def test_wald_summary_pins_normal_quantile():
    fit = LmmFit(
        column_names=["intercept", "x"],
        beta=np.array([2.0, -1.0]),
        se_model=np.array([0.5, 0.5]),
        tau2=0.1,
        sigma2=1.0,
        reml_loglik=0.0,
        n_iter=3,
        converged=True,
        boundary=False,
        sigma2_floored=False,
        n_obs=50,
        n_groups=5,
        se_robust=np.array([0.5, 0.25]),
    )
    rows = wald_summary(fit)
    assert rows[0].ci_low == pytest.approx(2.0 - 1.959964 * 0.5, abs=1e-12)
    assert rows[0].ci_high == pytest.approx(2.0 + 1.959964 * 0.5, abs=1e-12)
    # Two-sided normal p-value: erfc(|z| / sqrt(2)).
    assert rows[0].p_value == pytest.approx(math.erfc(4.0 / math.sqrt(2.0)), rel=1e-12)
    assert rows[0].stars == "***"
    assert rows[1].p_value == pytest.approx(math.erfc(4.0 / math.sqrt(2.0)), rel=1e-12)
    assert Z_975 == 1.959964


def test_wald_summary_requires_robust_errors():
    fit = LmmFit(
        column_names=["x"], beta=np.array([1.0]), se_model=np.array([1.0]),
        tau2=0.0, sigma2=1.0, reml_loglik=0.0, n_iter=0, converged=True,
        boundary=True, sigma2_floored=False, n_obs=10, n_groups=2,
    )
    with pytest.raises(ValueError):
        wald_summary(fit)


def test_problem_from_rows_listwise_deletion():
    rows = [
        {"y": 1.0, "a": 2.0, "subject_category": "stats"},
        {"y": 2.0, "a": None, "subject_category": "stats"},
        {"y": None, "a": 1.0, "subject_category": "ml"},
        {"y": 3.0, "a": 4.0, "subject_category": ""},
        {"y": 4.0, "a": 5.0, "subject_category": "ml"},
    ]
    prob, dropped = problem_from_rows(rows, outcome="y", covariates=["a"])
    assert dropped == 3
    assert prob.n_obs == 2
    assert prob.column_names == ["intercept", "a"]
    np.testing.assert_allclose(prob.X[:, 0], 1.0)
    np.testing.assert_allclose(prob.X[:, 1], [2.0, 5.0])
