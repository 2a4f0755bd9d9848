import dataclasses

import numpy as np
import pytest

from w2slab.config import ProblemConfig
from w2slab.data import FeatureMatrix, sample_dataset, features
from w2slab.ridgeless import (MinNormRegressor, RankDeficiencyError, RiskReport,
                              exact_excess_risk, fit_min_norm, holdout_excess_risk,
                              population_optimum, pseudolabel)
from w2slab.theory import cov_teacher


def small_problem(**kw):
    base = dict(d_z=6, p=4, p_T=3, p_S=2, sigma_y=0.5, sigma_xi=1.0,
                eta_l=0.2, eta_u=0.2, eta_t=0.5, n=200, N=300)
    base.update(kw)
    return ProblemConfig(**base)


def test_fit_recovers_noiseless_coefficients(rng):
    X = rng.standard_normal((120, 10))
    beta = rng.standard_normal(10)
    est = MinNormRegressor().fit(X, X @ beta)
    assert np.linalg.norm(est.coef_ - beta) / np.linalg.norm(beta) < 1e-8
    assert est.rank_ == 10
    assert est.residual_norm_ < 1e-9


def test_fit_matches_normal_equations_oracle():
    # d_z = 1, p_T = 2, 3 hand-written samples
    X = np.array([[1.0, 0.0], [1.0, 1.0], [2.0, -1.0]])
    y = np.array([1.0, 2.0, 0.5])
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    est = MinNormRegressor().fit(FeatureMatrix(values=X, block_width=2), y)
    assert np.allclose(est.coef_, oracle, atol=1e-12)
    assert est.block_width_ == 2


def test_fit_zero_targets(rng):
    X = rng.standard_normal((50, 7))
    est = MinNormRegressor().fit(X, np.zeros(50))
    assert np.allclose(est.coef_, 0.0)


def test_fit_rejects_underdetermined(rng):
    X = rng.standard_normal((5, 10))
    with pytest.raises(ValueError, match="overdetermined"):
        MinNormRegressor().fit(X, np.zeros(5))


def test_fit_rank_deficiency(rng):
    X = rng.standard_normal((40, 6))
    X[:, 5] = X[:, 0]   # exact collinearity
    with pytest.raises(RankDeficiencyError):
        MinNormRegressor().fit(X, rng.standard_normal(40))


def test_sklearn_params_roundtrip():
    est = MinNormRegressor(role="teacher", rank_rtol=1e-8)
    assert est.get_params() == {"role": "teacher", "rank_rtol": 1e-8}
    est.set_params(role="student")
    assert est.role == "student"


def test_population_optimum_layout():
    est = population_optimum(np.array([1.0, 0.0, 0.0]), block_width=2, role="teacher")
    assert np.allclose(est.coef_, [1.0, 0, 0, 0, 0, 0])
    beta = np.array([0.3, -1.2, 0.7])
    est = population_optimum(beta, block_width=3, role="teacher")
    coef = est.coef_.reshape(3, 3)
    assert np.allclose(coef[:, 0], beta)
    assert np.allclose(coef[:, 1:], 0.0)


def test_noiseless_fit_reaches_population_optimum(base_geometry):
    prob = small_problem(d_z=8, n=10 * 8 * 3)
    ds = sample_dataset(prob, base_geometry, eta=0.2, count=prob.n, seed=3,
                        noiseless=True)
    fm = features(ds, base_geometry, "teacher")
    est = fit_min_norm(fm, ds.y, role="teacher")
    opt = population_optimum(ds.beta_star, fm.block_width, "teacher")
    assert np.linalg.norm(est.coef_ - opt.coef_) < 1e-6


def test_pseudolabel_cases(base_geometry, rng):
    prob = small_problem(d_z=5)
    ds = sample_dataset(prob, base_geometry, eta=0.3, count=50, seed=4,
                        noiseless=True)
    fm = features(ds, base_geometry, "teacher")
    opt = population_optimum(ds.beta_star, fm.block_width, "teacher")
    assert np.allclose(pseudolabel(opt, fm), ds.y, atol=1e-12)

    zero = population_optimum(np.zeros(prob.d_z), fm.block_width, "teacher")
    assert np.allclose(pseudolabel(zero, fm), 0.0)

    est = population_optimum(rng.standard_normal(prob.d_z), fm.block_width, "teacher")
    by_hand = np.array([fm.values[i] @ est.coef_ for i in range(fm.count)])
    assert np.allclose(pseudolabel(est, fm), by_hand, atol=1e-14)


def test_exact_risk_zero_at_optimum(base_geometry):
    prob = small_problem()
    beta_star = np.arange(1.0, 7.0)
    opt = population_optimum(beta_star, 3, "teacher")
    rep = exact_excess_risk(opt, prob, base_geometry, eta_t=0.5, beta_star=beta_star)
    assert rep.excess_risk == 0.0
    assert rep.exact


def test_exact_risk_single_block(base_geometry):
    # delta = e_1 in the first block only: risk = C(eta_t)_{11} = 1
    prob = small_problem()
    beta_star = np.zeros(prob.d_z)
    coef = np.zeros(prob.d_z * 3)
    coef[0] = 1.0
    est = MinNormRegressor.from_coefficients(coef, role="teacher")
    rep = exact_excess_risk(est, prob, base_geometry, eta_t=0.7, beta_star=beta_star)
    assert rep.excess_risk == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("role,width", [("teacher", 3), ("student", 2)])
def test_exact_risk_dense_kronecker_oracle(base_geometry, seed, role, width):
    prob = small_problem(d_z=8)
    rg = np.random.default_rng(seed)
    beta_star = rg.standard_normal(prob.d_z)
    coef = rg.standard_normal(prob.d_z * width)
    est = MinNormRegressor.from_coefficients(coef, role=role)
    rep = exact_excess_risk(est, prob, base_geometry, eta_t=0.4, beta_star=beta_star)

    from w2slab.theory import cov_student
    C = (cov_teacher if role == "teacher" else cov_student)(base_geometry, 1.0, 0.4)
    Sigma = np.kron(np.eye(prob.d_z), C)
    e1 = np.zeros(width)
    e1[0] = 1.0
    delta = coef - np.kron(beta_star, e1)
    assert rep.excess_risk == pytest.approx(float(delta @ Sigma @ delta), rel=1e-12)


def test_holdout_risk_zero_at_optimum(base_geometry):
    prob = small_problem()
    ds = sample_dataset(prob, base_geometry, eta=0.5, count=500, seed=5)
    fm = features(ds, base_geometry, "teacher")
    opt = population_optimum(ds.beta_star, 3, "teacher")
    rep = holdout_excess_risk(opt, fm, ds, eta_t=0.5)
    assert rep.excess_risk == pytest.approx(0.0, abs=1e-25)
    assert not rep.exact


def test_holdout_risk_zero_coefficients(base_geometry):
    # beta = 0: estimate ~ E[(z^T beta_star)^2] = |beta_star|^2
    prob = small_problem(d_z=12)
    ds = sample_dataset(prob, base_geometry, eta=0.5, count=20_000, seed=6)
    fm = features(ds, base_geometry, "student")
    zero = MinNormRegressor.from_coefficients(np.zeros(prob.d_z * 2), role="student")
    rep = holdout_excess_risk(zero, fm, ds, eta_t=0.5)
    norm_sq = float(ds.beta_star @ ds.beta_star)
    assert rep.excess_risk == pytest.approx(norm_sq, rel=0.05)


def test_holdout_agrees_with_exact(base_geometry):
    """Paired comparison at test count 1e4 (meanshift draws so the exact
    metric is the true test second moment)."""
    prob = small_problem(d_z=16, n=400)
    diffs = []
    for seed in range(6):
        ds = sample_dataset(prob, base_geometry, eta=0.2, count=prob.n, seed=seed)
        fm = features(ds, base_geometry, "teacher")
        est = fit_min_norm(fm, ds.y, role="teacher")
        exact = exact_excess_risk(est, prob, base_geometry, 0.5, ds.beta_star)
        test = sample_dataset(prob, base_geometry, eta=0.5, count=10_000,
                              seed=1000 + seed, mode="meanshift", noiseless=True,
                              beta_star=ds.beta_star)
        hold = holdout_excess_risk(est, features(test, base_geometry, "teacher"),
                                   test, 0.5)
        diffs.append(hold.excess_risk - exact.excess_risk)
    diffs = np.asarray(diffs)
    se = diffs.std(ddof=1) / np.sqrt(len(diffs))
    assert abs(diffs.mean()) < 3 * max(se, 1e-3)


def test_risk_report_nonnegative():
    with pytest.raises(ValueError):
        RiskReport(excess_risk=-0.1, eta_t=0.5, role="teacher", exact=True)
