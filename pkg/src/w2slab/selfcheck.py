"""Bundled oracle identities: closed forms checked against dense linear
algebra, the Kronecker layout against a loop oracle, and the GCE gradient
against finite differences.  The CLI `selfcheck` subcommand wraps this."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ProblemConfig
from .data import sample_dataset, features
from .enhanced import SoftmaxHead
from .geometry import GroupGeometry, build_frames, build_mu_xi
from . import theory

__all__ = ["CheckResult", "run_selfcheck", "random_geometry"]

INV_TOL = 1e-12
TRACE_TOL = 1e-8
POP_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))
        object.__setattr__(self, "worst", float(self.worst))
        object.__setattr__(self, "tolerance", float(self.tolerance))

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}  (worst {self.worst:.3e}, tol {self.tolerance:.0e})"


def random_geometry(rng: np.random.Generator) -> tuple[GroupGeometry, float]:
    """Random admissible geometry plus a sigma_xi draw."""
    p_T = int(rng.integers(2, 6))
    p_S = int(rng.integers(2, p_T + 1))
    p = (p_T - 1) + (p_S - 1) + int(rng.integers(1, 3))
    xi_f2 = float(rng.uniform(0.0, 0.9 * (p_S - 1)))
    T, S = build_frames(p, p_T, p_S, xi_f2, seed=int(rng.integers(2 ** 31)))
    mu_T_target = rng.normal(size=p_T - 1) * rng.uniform(0.5, 3.0)
    mu_S_target = rng.normal(size=p_S - 1) * rng.uniform(0.1, 1.5)
    mu_xi = build_mu_xi(T, S, mu_T_target, mu_S_target)
    sigma_xi = float(rng.uniform(0.5, 2.0))
    return GroupGeometry(T=T, S=S, mu_xi=mu_xi), sigma_xi


def run_selfcheck(geometries: int = 100, seed: int = 0,
                  perturb_inverse: bool = False) -> list[CheckResult]:
    """All oracle checks; `perturb_inverse` is a fault-injection hook that
    corrupts the closed-form teacher inverse to prove the checks can fail."""
    rng = np.random.default_rng(seed)
    cases = [random_geometry(rng) for _ in range(geometries)]
    etas = rng.uniform(0.0, 1.0, size=(geometries, 3))

    def teacher_inv(geom, s, eta):
        inv = theory.cov_teacher_inv(geom, s, eta)
        if perturb_inverse:
            inv = inv.copy()
            inv[0, 0] += 1e-6
        return inv

    results = []

    worst = 0.0
    for (geom, s), (eta, _, _) in zip(cases, etas):
        k_t = geom.p_T
        r1 = np.linalg.norm(teacher_inv(geom, s, eta) @ theory.cov_teacher(geom, s, eta)
                            - np.eye(k_t))
        r2 = np.linalg.norm(theory.cov_student_inv(geom, s, eta) @ theory.cov_student(geom, s, eta)
                            - np.eye(geom.p_S))
        worst = max(worst, r1, r2)
    results.append(CheckResult("cov inverse identities", worst <= INV_TOL, worst, INV_TOL))

    worst = 0.0
    for (geom, s), (eta_t, eta_l, _) in zip(cases, etas):
        closed = theory.trace_identity_teacher(geom, s, eta_t, eta_l)
        dense = float(np.trace(theory.cov_teacher(geom, s, eta_t)
                               @ teacher_inv(geom, s, eta_l)))
        worst = max(worst, abs(closed - dense))
    results.append(CheckResult("teacher trace identity vs dense oracle",
                               worst <= TRACE_TOL, worst, TRACE_TOL))

    worst = 0.0
    for (geom, s), (eta_t, eta_l, eta_u) in zip(cases, etas):
        closed = theory.trace_identity_w2s(geom, s, eta_t, eta_u, eta_l)
        A = theory.cross_cov(geom, s, eta_u)
        CSi = theory.cov_student_inv(geom, s, eta_u)
        sandwich = A.T @ CSi @ theory.cov_student(geom, s, eta_t) @ CSi @ A
        dense = float(np.trace(sandwich @ teacher_inv(geom, s, eta_l)))
        worst = max(worst, abs(closed - dense))
    results.append(CheckResult("w2s trace identity vs five-matrix oracle",
                               worst <= TRACE_TOL, worst, TRACE_TOL))

    worst = 0.0
    e_hit = None
    for (geom, s), (_, _, eta) in zip(cases, etas):
        e1 = np.zeros(geom.p_T)
        e1[0] = 1.0
        lhs = np.linalg.solve(theory.cov_student(geom, s, eta),
                              theory.cross_cov(geom, s, eta) @ e1)
        target = np.zeros(geom.p_S)
        target[0] = 1.0
        worst = max(worst, float(np.linalg.norm(lhs - target)))
    results.append(CheckResult("C_S(eta)^-1 A(eta) e1 = e1", worst <= POP_TOL, worst, POP_TOL))

    results.append(_kronecker_layout_check(rng))
    results.append(_gce_gradient_check(rng))
    return results


def _kronecker_layout_check(rng: np.random.Generator) -> CheckResult:
    geom, sigma_xi = random_geometry(rng)
    prob = ProblemConfig(d_z=3, p=geom.p, p_T=geom.p_T, p_S=geom.p_S,
                         sigma_y=0.5, sigma_xi=sigma_xi, eta_l=0.3, eta_u=0.3,
                         eta_t=0.5, n=100, N=100)
    ds = sample_dataset(prob, geom, eta=0.3, count=8, seed=rng.integers(2 ** 31))
    worst = 0.0
    for which, F in (("teacher", geom.T), ("student", geom.S)):
        fm = features(ds, geom, which)
        width = fm.block_width
        for i in range(ds.count):
            w = np.concatenate([[1.0], F.T @ ds.XiMat[i]])
            for k in range(prob.d_z):
                for j in range(width):
                    worst = max(worst, abs(fm.values[i, k * width + j] - ds.Z[i, k] * w[j]))
    return CheckResult("Kronecker layout vs loop oracle", worst <= 1e-12, worst, 1e-12)


def _gce_gradient_check(rng: np.random.Generator) -> CheckResult:
    """Analytic head gradient vs central differences, CE and GCE(q)."""
    n, d = 40, 5
    X = rng.normal(size=(n, d))
    labels = rng.integers(0, 2, size=n)
    Y = np.eye(2)[labels]
    worst = 0.0
    for loss, q in (("ce", 0.0), ("gce", 0.2), ("gce", 0.7)):
        head = SoftmaxHead(loss=loss, q=q, epochs=1)
        head.coef_ = rng.normal(size=(2, d)) * 0.5
        head.intercept_ = rng.normal(size=2) * 0.1
        _, gW, gb = head._loss_and_grad(X, Y, labels)

        def loss_at(W, b):
            saved = head.coef_, head.intercept_
            head.coef_, head.intercept_ = W, b
            val = head._loss_and_grad(X, Y, labels)[0]
            head.coef_, head.intercept_ = saved
            return val

        eps = 1e-6
        for idx in np.ndindex(gW.shape):
            Wp, Wm = head.coef_.copy(), head.coef_.copy()
            Wp[idx] += eps
            Wm[idx] -= eps
            fd = (loss_at(Wp, head.intercept_) - loss_at(Wm, head.intercept_)) / (2 * eps)
            denom = max(abs(fd), 1e-8)
            worst = max(worst, abs(fd - gW[idx]) / denom)
        for j in range(2):
            bp, bm = head.intercept_.copy(), head.intercept_.copy()
            bp[j] += eps
            bm[j] -= eps
            fd = (loss_at(head.coef_, bp) - loss_at(head.coef_, bm)) / (2 * eps)
            denom = max(abs(fd), 1e-8)
            worst = max(worst, abs(fd - gb[j]) / denom)
    return CheckResult("GCE/CE gradient vs finite differences", worst <= 1e-4, worst, 1e-4)
