"""The two-stage ridgeless pipeline: minimum-norm least squares, pseudolabels,
and exact / held-out excess-risk evaluation against the known population
optimum beta_star (x) e_1.

`MinNormRegressor` is a scikit-learn style estimator (fit/predict/get_params)
so the solver composes with the wider ecosystem; the module-level functions
wire it to the Kronecker feature matrices and the risk metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator, RegressorMixin

from .config import ProblemConfig
from .data import Dataset, FeatureMatrix
from .geometry import GroupGeometry
from . import theory

__all__ = [
    "MinNormRegressor",
    "RankDeficiencyError",
    "RiskReport",
    "fit_min_norm",
    "population_optimum",
    "pseudolabel",
    "exact_excess_risk",
    "holdout_excess_risk",
]

RANK_RTOL = 1e-10


class RankDeficiencyError(RuntimeError):
    """Feature matrix lost rank; with Gaussian data this signals a config bug."""


def _as_2d_array(X) -> np.ndarray:
    vals = np.asarray(X, dtype=float)
    if vals.ndim != 2:
        raise ValueError(f"expected a 2-d design matrix, got shape {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("design matrix contains non-finite entries")
    return vals


class MinNormRegressor(BaseEstimator, RegressorMixin):
    """Least squares via an orthogonal decomposition (LAPACK gelsy).

    In the overdetermined full-rank regime used here the minimizer is unique,
    so the minimum-norm tie-break is vacuous; rank is still checked at
    `rank_rtol` relative to the largest singular value and deficiency raises.

    Attributes after fit: ``coef_``, ``rank_``, ``cond_`` (condition-number
    estimate), ``residual_norm_``, ``block_width_`` (when fit on a
    FeatureMatrix).
    """

    def __init__(self, role: str = "student", rank_rtol: float = RANK_RTOL):
        self.role = role
        self.rank_rtol = rank_rtol

    def fit(self, X, y):
        block_width = X.block_width if isinstance(X, FeatureMatrix) else None
        vals = _as_2d_array(X)
        y = np.asarray(y, dtype=float)
        if y.shape != (vals.shape[0],):
            raise ValueError(f"targets have shape {y.shape}, expected ({vals.shape[0]},)")
        count, dim = vals.shape
        if count <= dim:
            raise ValueError(
                f"overdetermined regime required: count={count} <= dim={dim}"
            )
        coef, _, rank = sla.lstsq(
            vals, y, cond=self.rank_rtol, lapack_driver="gelsy"
        )[:3]
        if rank < dim:
            raise RankDeficiencyError(
                f"effective rank {rank} < dimension {dim} at rtol {self.rank_rtol}"
            )
        self.coef_ = coef
        self.rank_ = int(rank)
        # cheap condition estimate from the Gram diagonal extremes
        col_norms = np.linalg.norm(vals, axis=0)
        self.cond_ = float(col_norms.max() / max(col_norms.min(), 1e-300))
        self.residual_norm_ = float(np.linalg.norm(vals @ coef - y))
        self.block_width_ = block_width
        return self

    def predict(self, X):
        vals = _as_2d_array(X)
        return vals @ self.coef_

    @classmethod
    def from_coefficients(cls, coef: np.ndarray, role: str,
                          block_width: int | None = None) -> "MinNormRegressor":
        est = cls(role=role)
        est.coef_ = np.asarray(coef, dtype=float)
        est.rank_ = est.coef_.shape[0]
        est.cond_ = 1.0
        est.residual_norm_ = 0.0
        est.block_width_ = block_width
        return est


@dataclass(frozen=True)
class RiskReport:
    excess_risk: float
    eta_t: float
    role: str
    exact: bool

    def __post_init__(self):
        if self.excess_risk < 0:
            raise ValueError(f"excess risk must be nonnegative, got {self.excess_risk}")


def fit_min_norm(feats: FeatureMatrix, targets: np.ndarray,
                 role: str = "student") -> MinNormRegressor:
    """Unique least-squares estimator on a Kronecker feature matrix."""
    return MinNormRegressor(role=role).fit(feats, targets)


def population_optimum(beta_star: np.ndarray, block_width: int,
                       role: str) -> MinNormRegressor:
    """beta_star (x) e_1 in the core-index-major block layout."""
    beta_star = np.asarray(beta_star, dtype=float)
    e1 = np.zeros(block_width)
    e1[0] = 1.0
    return MinNormRegressor.from_coefficients(
        np.kron(beta_star, e1), role=role, block_width=block_width
    )


def pseudolabel(teacher: MinNormRegressor, unlabeled_features: FeatureMatrix) -> np.ndarray:
    """Teacher predictions on the unlabeled pool."""
    return unlabeled_features.values @ teacher.coef_


def _delta_blocks(estimator: MinNormRegressor, beta_star: np.ndarray,
                  block_width: int) -> np.ndarray:
    opt = population_optimum(beta_star, block_width, estimator.role)
    delta = estimator.coef_ - opt.coef_
    return delta.reshape(-1, block_width)


def exact_excess_risk(estimator: MinNormRegressor, config: ProblemConfig,
                      geometry: GroupGeometry, eta_t: float,
                      beta_star: np.ndarray) -> RiskReport:
    """sum_k delta_k^T C(eta_t) delta_k without materializing I (x) C."""
    if estimator.role == "teacher":
        C = theory.cov_teacher(geometry, config.sigma_xi, eta_t)
        width = geometry.p_T
    else:
        C = theory.cov_student(geometry, config.sigma_xi, eta_t)
        width = geometry.p_S
    D = _delta_blocks(estimator, beta_star, width)
    er = float(np.sum((D @ C) * D))
    return RiskReport(excess_risk=max(er, 0.0), eta_t=eta_t,
                      role=estimator.role, exact=True)


def holdout_excess_risk(estimator: MinNormRegressor, test_features: FeatureMatrix,
                        test_dataset: Dataset, eta_t: float) -> RiskReport:
    """Monte-Carlo risk against the noise-free regression function."""
    preds = test_features.values @ estimator.coef_
    er = float(np.mean((preds - test_dataset.targets()) ** 2))
    return RiskReport(excess_risk=er, eta_t=eta_t, role=estimator.role, exact=False)
