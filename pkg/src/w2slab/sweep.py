"""Replicated end-to-end simulations over parameter grids, paired with the
closed-form predictions, exported as CSV.

Risk modes per replicate:

* ``exact``   — fit teacher and student on sampled data, evaluate the fitted
  coefficients with the closed-form risk metric (the default).
* ``holdout`` — same fits, risk estimated on a fresh test draw against the
  noise-free regression function.
* ``analytic`` — integrate the label noise out in closed form: the risks
  become traces of feature Grams (same expectation as ``exact``, far lower
  replicate variance; no fitted coefficients are materialized).

Seeds are derived as SeedSequence([master_seed, grid_index, replicate_index])
so every output is reproducible bit-for-bit and replicates are independent.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import ConfigError, ProblemConfig, RunConfig
from .data import FeatureMatrix, draw_beta_star, sample_dataset, features
from .geometry import GroupGeometry, build_geometry
from . import ridgeless, theory

__all__ = [
    "SweepSpec",
    "SweepRow",
    "SweepResult",
    "RISK_MODES",
    "SWEEP_AXES",
    "CSV_HEADER",
    "replicate_seed",
    "run_replicate",
    "run_sweep",
    "export_csv",
    "compare_to_theory",
]

RISK_MODES = ("exact", "holdout", "analytic")
SWEEP_AXES = ("eta_u", "nu_z", "mu_S_sq", "xi_frob_sq")
CSV_HEADER = (
    "axis,value,theory_teacher,theory_student,theory_gain,"
    "emp_gain_mean,emp_gain_se,replicates,cross_term"
)

_HOLDOUT_COUNT = 10_000


def replicate_seed(master_seed: int, grid_index: int, replicate_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, grid_index, replicate_index])


def _block_trace(C: np.ndarray, M: np.ndarray, d_z: int, width: int) -> float:
    """sum_k tr(C @ M_kk) over the width x width diagonal blocks of M."""
    blocks = np.einsum("kakb->kab", M.reshape(d_z, width, d_z, width))
    return float(np.einsum("ab,kba->", C, blocks))


def _analytic_risks(problem: ProblemConfig, geometry: GroupGeometry,
                    phi_t_labeled: FeatureMatrix, phi_t_unlabeled: FeatureMatrix,
                    phi_s_unlabeled: FeatureMatrix) -> tuple[float, float]:
    """Noise-integrated teacher/student excess risks given the feature draws."""
    sy2 = problem.sigma_y ** 2
    C_T_t = theory.cov_teacher(geometry, problem.sigma_xi, problem.eta_t)
    C_S_t = theory.cov_student(geometry, problem.sigma_xi, problem.eta_t)

    Phi = phi_t_labeled.values
    G_T = Phi.T @ Phi
    G_T_inv = np.linalg.inv(G_T)
    er_teacher = sy2 * _block_trace(C_T_t, G_T_inv, problem.d_z, problem.p_T)

    Psi = phi_s_unlabeled.values
    G_S = Psi.T @ Psi
    G_ST = Psi.T @ phi_t_unlabeled.values
    H = np.linalg.solve(G_S, G_ST)                      # d_S x d_T
    H3 = H.reshape(problem.d_z, problem.p_S, -1)
    SH = np.einsum("ab,zbm->zam", C_S_t, H3).reshape(H.shape)
    J = H.T @ SH                                        # d_T x d_T
    er_student = sy2 * float(np.trace(G_T_inv @ J))
    return er_teacher, er_student


def run_replicate(problem: ProblemConfig, geometry: GroupGeometry, seed,
                  risk_mode: str = "exact",
                  sampling_mode: str = "bernoulli") -> tuple[float, float, float]:
    """One labeled draw at eta_l, one unlabeled draw at eta_u, SFT ->
    pseudolabel -> W2S, risks at eta_t.  Returns (teacher, student, gain)."""
    if risk_mode not in RISK_MODES:
        raise ValueError(f"unknown risk mode '{risk_mode}'; expected one of {RISK_MODES}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seed_labeled, seed_unlabeled, seed_test, seed_beta = ss.spawn(4)

    beta_star = None
    if risk_mode != "analytic":
        rng = np.random.default_rng(seed_beta)
        beta_star = draw_beta_star(problem.d_z, problem.beta_star_norm, rng)

    labeled = sample_dataset(problem, geometry, problem.eta_l, problem.n,
                             mode=sampling_mode, seed=seed_labeled,
                             beta_star=beta_star)
    unlabeled = sample_dataset(problem, geometry, problem.eta_u, problem.N,
                               mode=sampling_mode, seed=seed_unlabeled,
                               beta_star=labeled.beta_star, noiseless=True)

    phi_t_labeled = features(labeled, geometry, "teacher")
    phi_t_unlabeled = features(unlabeled, geometry, "teacher")
    phi_s_unlabeled = features(unlabeled, geometry, "student")

    if risk_mode == "analytic":
        er_t, er_s = _analytic_risks(problem, geometry, phi_t_labeled,
                                     phi_t_unlabeled, phi_s_unlabeled)
        return er_t, er_s, er_t - er_s

    teacher = ridgeless.fit_min_norm(phi_t_labeled, labeled.y, role="teacher")
    pseudo = ridgeless.pseudolabel(teacher, phi_t_unlabeled)
    student = ridgeless.fit_min_norm(phi_s_unlabeled, pseudo, role="student")

    if risk_mode == "exact":
        er_t = ridgeless.exact_excess_risk(
            teacher, problem, geometry, problem.eta_t, labeled.beta_star).excess_risk
        er_s = ridgeless.exact_excess_risk(
            student, problem, geometry, problem.eta_t, labeled.beta_star).excess_risk
    else:
        test = sample_dataset(problem, geometry, problem.eta_t, _HOLDOUT_COUNT,
                              mode=sampling_mode, seed=seed_test,
                              beta_star=labeled.beta_star, noiseless=True)
        er_t = ridgeless.holdout_excess_risk(
            teacher, features(test, geometry, "teacher"), test, problem.eta_t).excess_risk
        er_s = ridgeless.holdout_excess_risk(
            student, features(test, geometry, "student"), test, problem.eta_t).excess_risk
    return er_t, er_s, er_t - er_s


@dataclass(frozen=True)
class SweepSpec:
    base: RunConfig
    axis: str
    grid: tuple[float, ...]
    replicates: int = 32
    master_seed: int | None = None      # defaults to base.seed
    risk_mode: str = "exact"
    sampling_mode: str = "bernoulli"
    jobs: int = 1

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis '{self.axis}'; expected one of {SWEEP_AXES}")
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.risk_mode not in RISK_MODES:
            raise ConfigError(f"unknown risk mode '{self.risk_mode}'")
        prob = self.base.problem
        for v in self.grid:
            if self.axis == "eta_u" and not 0.0 <= v <= 0.5:
                raise ConfigError(f"eta_u grid value {v} outside [0, 1/2]")
            if self.axis == "nu_z" and not 0.0 < v < 1.0 / prob.p_S:
                raise ConfigError(f"nu_z grid value {v} outside (0, 1/p_S)")
            if self.axis == "mu_S_sq" and v < 0:
                raise ConfigError(f"mu_S_sq grid value {v} negative")
            if self.axis == "xi_frob_sq" and not 0.0 <= v < prob.p_S - 1:
                raise ConfigError(
                    f"xi_frob_sq grid value {v} outside [0, p_S-1) (full alignment "
                    "couples the mean targets)")

    @property
    def seed(self) -> int:
        return self.base.seed if self.master_seed is None else self.master_seed


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    theory_teacher: float
    theory_student: float
    theory_gain: float
    emp_gain_mean: float
    emp_gain_se: float
    replicates: int
    cross_term: float
    emp_teacher_mean: float = math.nan      # not exported
    emp_student_mean: float = math.nan      # not exported
    error: str | None = None                # not exported


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    rows: tuple[SweepRow, ...]


def _grid_point(spec: SweepSpec, value: float) -> tuple[ProblemConfig, GroupGeometry]:
    """Problem and geometry at one grid value; geometry rebuilt for geometric axes."""
    base = spec.base
    prob = base.problem
    targets = base.targets
    if spec.axis == "eta_u":
        prob = replace(prob, eta_u=value)
    elif spec.axis == "nu_z":
        prob = replace(prob, N=int(round(prob.d_z / value)))
    elif spec.axis == "mu_S_sq":
        targets = replace(targets, mu_S_sq=value)
    elif spec.axis == "xi_frob_sq":
        targets = replace(targets, xi_frob_sq=value)
    geometry = build_geometry(prob, targets, base.seed)
    return prob, geometry


def _replicate_task(args):
    """Runs one replicate; failures come back as strings so a bad grid point
    is recorded instead of tearing down the pool."""
    (problem, geometry, master, grid_idx, rep_idx, risk_mode,
     sampling_mode, limit_threads) = args
    try:
        if limit_threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=1):
                out = run_replicate(problem, geometry,
                                    replicate_seed(master, grid_idx, rep_idx),
                                    risk_mode, sampling_mode)
        else:
            out = run_replicate(problem, geometry,
                                replicate_seed(master, grid_idx, rep_idx),
                                risk_mode, sampling_mode)
        return grid_idx, rep_idx, out, None
    except Exception as exc:
        return grid_idx, rep_idx, None, f"{type(exc).__name__}: {exc}"


def run_sweep(spec: SweepSpec) -> SweepResult:
    points = [_grid_point(spec, v) for v in spec.grid]

    tasks = [
        (points[gi][0], points[gi][1], spec.seed, gi, ri, spec.risk_mode,
         spec.sampling_mode, spec.jobs > 1)
        for gi in range(len(spec.grid))
        for ri in range(spec.replicates)
    ]
    results: dict[tuple[int, int], tuple] = {}
    errors: dict[int, str] = {}
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            for gi, ri, out, err in pool.map(_replicate_task, tasks, chunksize=1):
                if err is not None:
                    errors.setdefault(gi, err)
                else:
                    results[(gi, ri)] = out
    else:
        for t in tasks:
            if t[3] in errors:
                continue
            gi, ri, out, err = _replicate_task(t)
            if err is not None:
                errors[gi] = err
            else:
                results[(gi, ri)] = out

    rows = []
    for gi, value in enumerate(spec.grid):
        prob, geometry = points[gi]
        pred = theory.w2s_risk(prob, geometry)
        cross = float(geometry.mu_T @ geometry.Xi @ geometry.mu_S)
        err = errors.get(gi)
        reps = [results[(gi, ri)] for ri in range(spec.replicates)
                if (gi, ri) in results]
        if err is not None or len(reps) < spec.replicates:
            rows.append(SweepRow(
                axis=spec.axis, value=value,
                theory_teacher=pred.teacher_risk, theory_student=pred.student_risk,
                theory_gain=pred.gain, emp_gain_mean=math.nan, emp_gain_se=math.nan,
                replicates=len(reps), cross_term=cross,
                error=err or "incomplete replicates",
            ))
            continue
        arr = np.asarray(reps)
        gains = arr[:, 2]
        se = float(gains.std(ddof=1) / math.sqrt(len(gains))) if len(gains) > 1 else 0.0
        rows.append(SweepRow(
            axis=spec.axis, value=value,
            theory_teacher=pred.teacher_risk, theory_student=pred.student_risk,
            theory_gain=pred.gain,
            emp_gain_mean=float(gains.mean()), emp_gain_se=se,
            replicates=len(gains), cross_term=cross,
            emp_teacher_mean=float(arr[:, 0].mean()),
            emp_student_mean=float(arr[:, 1].mean()),
        ))
    return SweepResult(spec=spec, rows=tuple(rows))


def export_csv(result: SweepResult, destination) -> None:
    if not result.rows:
        raise ValueError("sweep result has no rows")
    lines = [CSV_HEADER]
    for r in result.rows:
        lines.append(",".join([
            r.axis, repr(float(r.value)),
            repr(float(r.theory_teacher)), repr(float(r.theory_student)),
            repr(float(r.theory_gain)), repr(float(r.emp_gain_mean)),
            repr(float(r.emp_gain_se)), str(r.replicates),
            repr(float(r.cross_term)),
        ]))
    text = "\n".join(lines) + "\n"
    with open(destination, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


@dataclass(frozen=True)
class ComparisonRow:
    value: float
    passed: bool
    abs_diff: float
    bound: float


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ComparisonRow, ...]
    fraction_passed: float

    @property
    def all_passed(self) -> bool:
        return self.fraction_passed == 1.0


def compare_to_theory(result: SweepResult, abs_tol: float) -> ComparisonReport:
    """Flag rows where |empirical - theory| > max(abs_tol, 3 se)."""
    if not result.rows:
        raise ValueError("sweep result has no rows")
    rows = []
    for r in result.rows:
        if r.error is not None or math.isnan(r.emp_gain_mean):
            rows.append(ComparisonRow(value=r.value, passed=False,
                                      abs_diff=math.nan, bound=abs_tol))
            continue
        diff = abs(r.emp_gain_mean - r.theory_gain)
        bound = max(abs_tol, 3.0 * r.emp_gain_se)
        rows.append(ComparisonRow(value=r.value, passed=diff <= bound,
                                  abs_diff=diff, bound=bound))
    frac = sum(r.passed for r in rows) / len(rows)
    return ComparisonReport(rows=tuple(rows), fraction_passed=frac)
