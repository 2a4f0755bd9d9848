"""Group-feature geometry: orthonormal frames, similarity, and the mean vector.

The teacher frame T (p x p_T-1) and student frame S (p x p_S-1) live on the
Stiefel manifold; their overlap Xi = T^T S controls how much of the teacher's
group representation the student inherits.  The mean vector mu_xi is placed
inside span(T) + span(S) so that the projected means T^T mu_xi and S^T mu_xi
hit prescribed targets exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ProblemConfig, GeometryTargets

__all__ = [
    "GroupGeometry",
    "GeometryError",
    "build_frames",
    "build_mu_xi",
    "build_geometry",
    "validate",
    "save_geometry",
    "load_geometry",
]

ORTHO_TOL = 1e-10


class GeometryError(ValueError):
    """Impossible frame/mean construction request."""


@dataclass(frozen=True)
class GroupGeometry:
    """Frames, mean vector, and the derived similarity quantities."""

    T: np.ndarray          # p x (p_T-1), orthonormal columns
    S: np.ndarray          # p x (p_S-1), orthonormal columns
    mu_xi: np.ndarray      # p

    @property
    def mu_T(self) -> np.ndarray:
        return self.T.T @ self.mu_xi

    @property
    def mu_S(self) -> np.ndarray:
        return self.S.T @ self.mu_xi

    @property
    def Xi(self) -> np.ndarray:
        return self.T.T @ self.S

    @property
    def p_wedge(self) -> float:
        return 1.0 + float(np.sum(self.Xi ** 2))

    @property
    def p(self) -> int:
        return self.T.shape[0]

    @property
    def p_T(self) -> int:
        return self.T.shape[1] + 1

    @property
    def p_S(self) -> int:
        return self.S.shape[1] + 1


def _random_orthonormal(p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """p x k frame with orthonormal columns, Haar-ish via QR of a Gaussian."""
    A = rng.standard_normal((p, k))
    Q, R = np.linalg.qr(A)
    # fix signs so the construction is deterministic given the Gaussian draw
    return Q * np.sign(np.diag(R))


def _complete_orthonormal(p: int, existing: np.ndarray, k: int,
                          rng: np.random.Generator) -> np.ndarray:
    """k orthonormal columns orthogonal to the columns of `existing`."""
    if k == 0:
        return np.zeros((p, 0))
    if existing.shape[1] + k > p:
        raise GeometryError(
            f"cannot fit {k} extra orthonormal directions in R^{p} "
            f"alongside {existing.shape[1]} existing ones"
        )
    A = rng.standard_normal((p, k))
    A -= existing @ (existing.T @ A)
    Q, R = np.linalg.qr(A)
    return Q * np.sign(np.diag(R))


def build_frames(p: int, p_T: int, p_S: int, xi_frob_sq_target: float,
                 seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal frames (T, S) with ||T^T S||_F^2 equal to the target.

    S is a random frame; the first p_S-1 columns of T are
    cos(theta)*s_i + sin(theta)*r_i with {r_i} orthonormal and orthogonal to
    span(S), theta = arccos(sqrt(target/(p_S-1))); remaining columns of T are
    filled orthonormally in the complement of span(S) + span(r).
    """
    if not 0 <= xi_frob_sq_target <= p_S - 1:
        raise GeometryError(
            f"xi_frob_sq target {xi_frob_sq_target} outside [0, p_S-1] = [0, {p_S - 1}]"
        )
    if p < (p_T - 1) + (p_S - 1):
        raise GeometryError(
            f"ambient dimension p={p} too small for p_T-1={p_T - 1} plus "
            f"p_S-1={p_S - 1} independent directions"
        )
    rng = np.random.default_rng(seed)
    S = _random_orthonormal(p, p_S - 1, rng)
    cos_t = np.sqrt(xi_frob_sq_target / (p_S - 1))
    sin_t = np.sqrt(max(0.0, 1.0 - cos_t ** 2))
    R = _complete_orthonormal(p, S, p_S - 1, rng)
    aligned = cos_t * S + sin_t * R
    n_fill = (p_T - 1) - (p_S - 1)
    fill = _complete_orthonormal(p, np.column_stack([S, R]), n_fill, rng)
    T = np.column_stack([aligned, fill])
    return T, S


def build_mu_xi(T: np.ndarray, S: np.ndarray, mu_T_target: np.ndarray,
                mu_S_target: np.ndarray) -> np.ndarray:
    """mu_xi in span(T)+span(S) with T^T mu_xi and S^T mu_xi equal to targets.

    Solves the coupled system [I, Xi; Xi^T, I] [a; b] = [mu_T; mu_S] and
    returns T a + S b.  Requires ||Xi||_2 < 1 strictly; at full alignment the
    two targets are no longer independent.
    """
    mu_T_target = np.atleast_1d(np.asarray(mu_T_target, dtype=float))
    mu_S_target = np.atleast_1d(np.asarray(mu_S_target, dtype=float))
    kT, kS = T.shape[1], S.shape[1]
    if mu_T_target.shape != (kT,) or mu_S_target.shape != (kS,):
        raise GeometryError(
            f"target shapes {mu_T_target.shape}/{mu_S_target.shape} do not match "
            f"frame widths {kT}/{kS}"
        )
    Xi = T.T @ S
    if np.linalg.norm(Xi, 2) >= 1.0 - 1e-12:
        raise GeometryError(
            "||Xi||_2 = 1 within tolerance: frames share a direction, "
            "mu_T and mu_S targets are coupled"
        )
    M = np.block([[np.eye(kT), Xi], [Xi.T, np.eye(kS)]])
    ab = np.linalg.solve(M, np.concatenate([mu_T_target, mu_S_target]))
    return T @ ab[:kT] + S @ ab[kT:]


def build_geometry(config: ProblemConfig, targets: GeometryTargets,
                   seed: int) -> GroupGeometry:
    """Frames plus mean vector realizing the configured norm targets.

    Targets are placed along the leading frame coordinate (e_1-aligned), so
    the realized cross term mu_T^T Xi mu_S is determined by the construction.
    """
    T, S = build_frames(config.p, config.p_T, config.p_S, targets.xi_frob_sq, seed)
    mu_T_target = np.zeros(config.p_T - 1)
    mu_T_target[0] = np.sqrt(targets.mu_T_sq)
    mu_S_target = np.zeros(config.p_S - 1)
    mu_S_target[0] = np.sqrt(targets.mu_S_sq)
    if targets.mu_T_sq == 0.0 and targets.mu_S_sq == 0.0:
        mu_xi = np.zeros(config.p)
    else:
        mu_xi = build_mu_xi(T, S, mu_T_target, mu_S_target)
    return GroupGeometry(T=T, S=S, mu_xi=mu_xi)


def validate(config: ProblemConfig, geometry: GroupGeometry) -> list[str]:
    """Every violated invariant as a message; empty means valid."""
    report = list(config.violations())

    p, p_T, p_S = config.p, config.p_T, config.p_S
    if geometry.T.shape != (p, p_T - 1):
        report.append(f"T has shape {geometry.T.shape}, expected {(p, p_T - 1)}")
    if geometry.S.shape != (p, p_S - 1):
        report.append(f"S has shape {geometry.S.shape}, expected {(p, p_S - 1)}")
    if geometry.mu_xi.shape != (p,):
        report.append(f"mu_xi has shape {geometry.mu_xi.shape}, expected {(p,)}")
    if report:
        return report

    t_defect = np.linalg.norm(geometry.T.T @ geometry.T - np.eye(p_T - 1))
    s_defect = np.linalg.norm(geometry.S.T @ geometry.S - np.eye(p_S - 1))
    if t_defect > ORTHO_TOL:
        report.append(f"T Stiefel defect ||T^T T - I||_F = {t_defect:.3e} > {ORTHO_TOL}")
    if s_defect > ORTHO_TOL:
        report.append(f"S Stiefel defect ||S^T S - I||_F = {s_defect:.3e} > {ORTHO_TOL}")

    xi_f2 = float(np.sum(geometry.Xi ** 2))
    if xi_f2 > p_S - 1 + ORTHO_TOL:
        report.append(f"||Xi||_F^2 = {xi_f2:.6f} exceeds p_S - 1 = {p_S - 1}")
    if np.linalg.norm(geometry.Xi, 2) > 1 + ORTHO_TOL:
        report.append("||Xi||_2 exceeds 1")
    if not (1 - ORTHO_TOL <= geometry.p_wedge <= p_S + ORTHO_TOL):
        report.append(f"p_wedge = {geometry.p_wedge:.6f} outside [1, p_S]")
    return report


def save_geometry(path, geometry: GroupGeometry) -> None:
    """Self-describing numeric container (column-major arrays + dimensions)."""
    np.savez(
        path,
        T=np.asfortranarray(geometry.T),
        S=np.asfortranarray(geometry.S),
        mu_xi=geometry.mu_xi,
        dims=np.array([geometry.p, geometry.p_T, geometry.p_S], dtype=np.int64),
    )


def load_geometry(path) -> GroupGeometry:
    with np.load(path) as data:
        return GroupGeometry(T=data["T"].copy(), S=data["S"].copy(),
                             mu_xi=data["mu_xi"].copy())
