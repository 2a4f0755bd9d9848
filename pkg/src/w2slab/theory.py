"""Closed-form predictors: population covariance blocks, trace identities,
asymptotic excess risks, the optimal unlabeled minority fraction, and the
negative-gain criterion.

All formulas are exact proportional-limit expressions; everything is a pure
function of the geometry and a handful of scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ProblemConfig
from .geometry import GroupGeometry

__all__ = [
    "CovBlocks",
    "GainPrediction",
    "FailureReport",
    "cov_teacher",
    "cov_teacher_inv",
    "cov_student",
    "cov_student_inv",
    "cross_cov",
    "cov_blocks",
    "trace_identity_teacher",
    "trace_identity_w2s",
    "sft_risk",
    "w2s_risk",
    "optimal_eta_u",
    "failure_criterion",
]

DEGENERATE_TOL = 1e-12


def _check_sigma(sigma_xi: float) -> None:
    if sigma_xi <= 0:
        raise ValueError(f"sigma_xi must be positive, got {sigma_xi}")


def _cov(mu: np.ndarray, sigma_xi: float, eta: float) -> np.ndarray:
    k = mu.shape[0] + 1
    C = np.zeros((k, k))
    C[0, 0] = 1.0
    C[0, 1:] = eta * mu
    C[1:, 0] = eta * mu
    C[1:, 1:] = sigma_xi ** 2 * np.eye(k - 1) + eta ** 2 * np.outer(mu, mu)
    return C


def _cov_inv(mu: np.ndarray, sigma_xi: float, eta: float) -> np.ndarray:
    k = mu.shape[0] + 1
    inv = np.zeros((k, k))
    s2 = sigma_xi ** 2
    inv[0, 0] = 1.0 + (eta ** 2) * float(mu @ mu) / s2
    inv[0, 1:] = -eta * mu / s2
    inv[1:, 0] = -eta * mu / s2
    inv[1:, 1:] = np.eye(k - 1) / s2
    return inv


def cov_teacher(geometry: GroupGeometry, sigma_xi: float, eta: float) -> np.ndarray:
    """Population second moment of the teacher group block w = [1; T^T xi]."""
    _check_sigma(sigma_xi)
    return _cov(geometry.mu_T, sigma_xi, eta)


def cov_teacher_inv(geometry: GroupGeometry, sigma_xi: float, eta: float) -> np.ndarray:
    """Closed-form inverse of cov_teacher (block matrix inversion)."""
    _check_sigma(sigma_xi)
    return _cov_inv(geometry.mu_T, sigma_xi, eta)


def cov_student(geometry: GroupGeometry, sigma_xi: float, eta: float) -> np.ndarray:
    """Population second moment of the student group block psi = [1; S^T xi]."""
    _check_sigma(sigma_xi)
    return _cov(geometry.mu_S, sigma_xi, eta)


def cov_student_inv(geometry: GroupGeometry, sigma_xi: float, eta: float) -> np.ndarray:
    _check_sigma(sigma_xi)
    return _cov_inv(geometry.mu_S, sigma_xi, eta)


def cross_cov(geometry: GroupGeometry, sigma_xi: float, eta: float) -> np.ndarray:
    """Cross second moment E[psi w^T], a p_S x p_T block.

    Lower-right block is sigma_xi^2 S^T T + eta^2 mu_S mu_T^T.
    """
    _check_sigma(sigma_xi)
    mu_T, mu_S = geometry.mu_T, geometry.mu_S
    A = np.zeros((geometry.p_S, geometry.p_T))
    A[0, 0] = 1.0
    A[0, 1:] = eta * mu_T
    A[1:, 0] = eta * mu_S
    A[1:, 1:] = sigma_xi ** 2 * geometry.Xi.T + eta ** 2 * np.outer(mu_S, mu_T)
    return A


@dataclass(frozen=True)
class CovBlocks:
    """The population blocks at one minority fraction."""

    C_T_eta: np.ndarray
    C_S_eta: np.ndarray
    A_eta: np.ndarray
    eta: float


def cov_blocks(geometry: GroupGeometry, sigma_xi: float, eta: float) -> CovBlocks:
    return CovBlocks(
        C_T_eta=cov_teacher(geometry, sigma_xi, eta),
        C_S_eta=cov_student(geometry, sigma_xi, eta),
        A_eta=cross_cov(geometry, sigma_xi, eta),
        eta=eta,
    )


def trace_identity_teacher(geometry: GroupGeometry, sigma_xi: float,
                           eta_t: float, eta_l: float) -> float:
    """tr(C_T(eta_t) C_T(eta_l)^-1) = p_T + (eta_t-eta_l)^2 ||mu_T||^2 / sigma_xi^2."""
    _check_sigma(sigma_xi)
    mu_T = geometry.mu_T
    return geometry.p_T + (eta_t - eta_l) ** 2 * float(mu_T @ mu_T) / sigma_xi ** 2


def trace_identity_w2s(geometry: GroupGeometry, sigma_xi: float,
                       eta_t: float, eta_u: float, eta_l: float) -> float:
    """tr(C_{T,S}(eta_t, eta_u) C_T(eta_l)^-1) in closed form.

    Equals p_wedge + ||(eta_u-eta_l) mu_T + (eta_t-eta_u) Xi mu_S||^2 / sigma_xi^2,
    with C_{T,S} the five-matrix sandwich A^T C_S^-1 C_S(eta_t) C_S^-1 A.
    """
    _check_sigma(sigma_xi)
    v = (eta_u - eta_l) * geometry.mu_T + (eta_t - eta_u) * (geometry.Xi @ geometry.mu_S)
    return geometry.p_wedge + float(v @ v) / sigma_xi ** 2


@dataclass(frozen=True)
class GainPrediction:
    """Asymptotic teacher/student risks with their decomposed parts.

    The parts are the dimensionless trace contributions:
    teacher_risk = sigma_y^2 gamma_z (V_T0 + V_T1),
    student_risk = sigma_y^2 gamma_z (V_S0 + V_S1 + E_S).
    """

    teacher_risk: float
    student_risk: float
    gain: float
    V_T0: float
    V_T1: float
    V_S0: float
    V_S1: float
    E_S: float


def sft_risk(config: ProblemConfig, geometry: GroupGeometry) -> float:
    """Asymptotic excess risk of the supervised-fine-tuned teacher."""
    tr = trace_identity_teacher(geometry, config.sigma_xi, config.eta_t, config.eta_l)
    return config.sigma_y ** 2 * config.gamma_z * tr


def w2s_risk(config: ProblemConfig, geometry: GroupGeometry) -> GainPrediction:
    """Asymptotic student risk after pseudolabel fine-tuning, decomposed."""
    s2 = config.sigma_xi ** 2
    mu_T, mu_S = geometry.mu_T, geometry.mu_S
    eta_l, eta_u, eta_t = config.eta_l, config.eta_u, config.eta_t

    V_T0 = float(geometry.p_T)
    V_T1 = (eta_t - eta_l) ** 2 * float(mu_T @ mu_T) / s2
    V_S0 = geometry.p_wedge
    v = (eta_u - eta_l) * mu_T + (eta_t - eta_u) * (geometry.Xi @ mu_S)
    V_S1 = float(v @ v) / s2
    E_S = config.nu_z * (geometry.p_T - geometry.p_wedge) * (
        geometry.p_S + (eta_t - eta_u) ** 2 * float(mu_S @ mu_S) / s2
    )

    scale = config.sigma_y ** 2 * config.gamma_z
    teacher = scale * (V_T0 + V_T1)
    student = scale * (V_S0 + V_S1 + E_S)
    return GainPrediction(
        teacher_risk=teacher, student_risk=student, gain=teacher - student,
        V_T0=V_T0, V_T1=V_T1, V_S0=V_S0, V_S1=V_S1, E_S=E_S,
    )


def optimal_eta_u(config: ProblemConfig, geometry: GroupGeometry) -> float:
    """Unlabeled minority fraction maximizing the gain in the nu_z -> 0 limit.

    (eta_l ||mu_T||^2 - (eta_t+eta_l) mu_T^T Xi mu_S + eta_t ||Xi mu_S||^2)
    / ||mu_T - Xi mu_S||^2.  May fall outside the trainable range [0, 1/2];
    callers report the clamp.
    """
    mu_T = geometry.mu_T
    xms = geometry.Xi @ geometry.mu_S
    diff = mu_T - xms
    denom = float(diff @ diff)
    if np.sqrt(denom) < DEGENERATE_TOL:
        raise ValueError(
            "mu_T equals Xi mu_S within tolerance: gain is flat in eta_u "
            "at leading order, no unique maximizer"
        )
    num = (
        config.eta_l * float(mu_T @ mu_T)
        - (config.eta_t + config.eta_l) * float(mu_T @ xms)
        + config.eta_t * float(xms @ xms)
    )
    return num / denom


@dataclass(frozen=True)
class FailureReport:
    """Sign of the predicted gain plus the sufficient negative-gain condition."""

    gain: float                      # at the configured nu_z
    gain_nu_zero: float              # nu_z -> 0 limit
    negative_for_all_nu: bool        # E_S >= 0, so this is gain_nu_zero <= 0
    separation_ratio: float          # ||mu_T||^2 / sigma_xi^2
    separation_threshold: float      # 12.5 (p_T - 1)
    condition_applies: bool          # orthogonal frames + threshold exceeded


def failure_criterion(config: ProblemConfig, geometry: GroupGeometry) -> FailureReport:
    """Does pseudolabel fine-tuning lose to the teacher at this configuration?

    The sufficient condition (orthogonal frames, eta_l=0.4, eta_u=0.1,
    eta_t=1/2 context): gain < 0 for every nu_z once
    ||mu_T||^2/sigma_xi^2 > 12.5 (p_T - 1).
    """
    pred = w2s_risk(config, geometry)
    gain_nu0 = pred.gain + config.sigma_y ** 2 * config.gamma_z * pred.E_S
    ratio = float(geometry.mu_T @ geometry.mu_T) / config.sigma_xi ** 2
    threshold = 12.5 * (geometry.p_T - 1)
    xi_zero = float(np.sum(geometry.Xi ** 2)) < 1e-12
    return FailureReport(
        gain=pred.gain,
        gain_nu_zero=gain_nu0,
        negative_for_all_nu=gain_nu0 < 0,
        separation_ratio=ratio,
        separation_threshold=threshold,
        condition_applies=xi_zero and ratio > threshold,
    )
