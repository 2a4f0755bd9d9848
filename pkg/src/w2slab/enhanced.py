"""Confidence-based retraining on a synthetic spurious-correlation
classification analog: softmax heads over the Kronecker features, vanilla
pseudolabel cross-entropy, then retraining on the lowest-entropy fraction p
with the generalized cross-entropy loss GCE(q).

Class labels are the sign of the regression target (c = 1{z^T beta >= 0});
the group label agrees with the class with probability 1 - eta, so the
minority rows are exactly those with g != c and the spurious feature is
predictive on imbalanced splits.

The heads see [1; z] (x) [1; F^T xi]: the intercept coordinate in the core
block gives the head additive access to the group block, the way a frozen
backbone embedding exposes background features directly.  Without it the
group feature only modulates core coordinates multiplicatively and an
imbalanced split cannot mislead the head on both minority cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .config import ProblemConfig
from .data import draw_beta_star
from .geometry import GroupGeometry

__all__ = [
    "ClassifConfig",
    "ClassifDataset",
    "SoftmaxHead",
    "HeadHyper",
    "DivergenceError",
    "classif_features",
    "gce_loss",
    "gen_classif",
    "train_head",
    "entropy_select",
    "enhanced_pipeline",
    "ablation_grid",
    "SeedMetrics",
    "AblationCell",
    "AblationSummary",
    "ENHANCE_CSV_HEADER",
    "GRID_P",
    "GRID_P_RESTRICTED",
    "GRID_Q",
]

GRID_P = (0.2, 0.4, 0.6, 0.8, 1.0)
GRID_P_RESTRICTED = (0.2, 0.4, 0.6)      # imbalanced-labeled setting
GRID_Q = (0.0, 0.2, 0.7)
ENHANCE_CSV_HEADER = (
    "setting,p,q,seed,teacher_avg,vanilla_avg,enhanced_avg,"
    "teacher_wga,vanilla_wga,enhanced_wga,subset_minority_frac"
)


class DivergenceError(RuntimeError):
    """Head training produced a non-finite loss."""


@dataclass(frozen=True)
class HeadHyper:
    lr: float = 0.1
    epochs: int = 500
    batch_size: int | None = None        # None = full batch

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("head hyperparameters must be positive")


@dataclass(frozen=True)
class ClassifConfig:
    """Classification-analog parameters on top of the regression task."""

    problem: ProblemConfig
    eta_o: float = 0.05
    hyper: HeadHyper = field(default_factory=HeadHyper)
    select_frac: float = 0.4             # p
    gce_q: float = 0.2                   # q
    test_count: int = 4000
    val_frac: float = 0.2                # share of the test pool used for (p, q) selection
    cold_start: bool = False             # retrain from zeros instead of the W2S head

    def __post_init__(self):
        if not 0.0 < self.select_frac <= 1.0:
            raise ValueError(f"selection fraction must be in (0, 1], got {self.select_frac}")
        if not 0.0 <= self.gce_q <= 1.0:
            raise ValueError(f"gce q must be in [0, 1], got {self.gce_q}")
        if not 0.0 <= self.eta_o <= 0.5:
            raise ValueError(f"eta_o must be in [0, 1/2], got {self.eta_o}")

    @property
    def vanilla_equivalent(self) -> bool:
        return self.select_frac == 1.0 and self.gce_q == 0.0


@dataclass(frozen=True)
class ClassifDataset:
    """Classification rows; minority means the group disagrees with the class."""

    Z: np.ndarray
    XiMat: np.ndarray
    g: np.ndarray
    c: np.ndarray
    beta_star: np.ndarray
    eta: float

    @property
    def count(self) -> int:
        return self.Z.shape[0]

    @property
    def minority(self) -> np.ndarray:
        return self.g != self.c

    def cells(self) -> np.ndarray:
        """(class, group) cell id per row: 2*c + g."""
        return 2 * self.c + self.g


def gce_loss(prob_correct, q: float):
    """(1 - p^q)/q for q > 0; the cross-entropy limit -log p at q = 0."""
    p = np.asarray(prob_correct, dtype=float)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("prob_correct must lie in (0, 1]")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    out = -np.log(p) if q == 0.0 else (1.0 - p ** q) / q
    return float(out) if out.ndim == 0 else out


def gen_classif(config: ClassifConfig, geometry: GroupGeometry, eta: float,
                count: int, seed, beta_star: np.ndarray | None = None) -> ClassifDataset:
    """Sample rows: c from the sign of the core regression function, g aligned
    with c except with probability eta, xi ~ N(g mu_xi, sigma_xi^2 I)."""
    if not 0.0 <= eta <= 0.5:
        raise ValueError(f"eta must lie in [0, 1/2], got {eta}")
    prob = config.problem
    rng = np.random.default_rng(seed)
    if beta_star is None:
        beta_star = draw_beta_star(prob.d_z, prob.beta_star_norm, rng)
    Z = rng.standard_normal((count, prob.d_z))
    c = (Z @ beta_star >= 0).astype(np.int64)
    flip = rng.random(count) < eta
    g = np.where(flip, 1 - c, c)
    XiMat = g[:, None] * geometry.mu_xi + prob.sigma_xi * rng.standard_normal((count, prob.p))
    return ClassifDataset(Z=Z, XiMat=XiMat, g=g, c=c, beta_star=beta_star, eta=eta)


def classif_features(dataset, geometry: GroupGeometry, which: str) -> np.ndarray:
    """Intercept-augmented Kronecker features [1; z] (x) [1; F^T xi]."""
    F = geometry.T if which == "teacher" else geometry.S
    W = np.column_stack([np.ones(dataset.count), dataset.XiMat @ F])
    Zt = np.column_stack([np.ones(dataset.count), dataset.Z])
    return np.einsum("nk,nj->nkj", Zt, W).reshape(dataset.count, -1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    # non-finite logits are allowed through; the divergence check in the
    # training loop catches the resulting NaN loss
    with np.errstate(over="ignore", invalid="ignore"):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class SoftmaxHead(BaseEstimator, ClassifierMixin):
    """Two-class softmax head trained by (full-batch) gradient descent.

    ``loss`` is "ce" or "gce"; with "gce" the per-sample gradient is the CE
    gradient weighted by p_label^q, matching d/dlogits (1 - p^q)/q.
    """

    def __init__(self, lr: float = 0.1, epochs: int = 500,
                 batch_size: int | None = None, loss: str = "ce",
                 q: float = 0.0, warm_start: bool = False, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.q = q
        self.warm_start = warm_start
        self.seed = seed

    def _loss_and_grad(self, X, Y, labels):
        with np.errstate(over="ignore", invalid="ignore"):
            logits = X @ self.coef_.T + self.intercept_
        P = _softmax(logits)
        p_label = P[np.arange(X.shape[0]), labels]
        p_label = np.clip(p_label, 1e-300, 1.0)
        if self.loss == "gce" and self.q > 0:
            loss = float(np.mean((1.0 - p_label ** self.q) / self.q))
            w = p_label ** self.q
        else:
            loss = float(np.mean(-np.log(p_label)))
            w = np.ones_like(p_label)
        G = (w[:, None] * (P - Y)) / X.shape[0]
        return loss, G.T @ X, G.sum(axis=0)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        labels = np.asarray(y)
        if X.ndim != 2 or labels.shape != (X.shape[0],):
            raise ValueError(f"bad shapes: X {X.shape}, y {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        if self.loss not in ("ce", "gce"):
            raise ValueError(f"loss must be 'ce' or 'gce', got '{self.loss}'")
        labels = labels.astype(np.int64)
        self.classes_ = np.array([0, 1])

        d = X.shape[1]
        if not (self.warm_start and hasattr(self, "coef_")):
            self.coef_ = np.zeros((2, d))
            self.intercept_ = np.zeros(2)
        Y = np.eye(2)[labels]

        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        for epoch in range(self.epochs):
            with np.errstate(over="ignore", invalid="ignore"):
                if self.batch_size is None or self.batch_size >= n:
                    loss, gW, gb = self._loss_and_grad(X, Y, labels)
                    if not math.isfinite(loss):
                        raise DivergenceError(f"non-finite loss at epoch {epoch}")
                    self.coef_ -= self.lr * gW
                    self.intercept_ -= self.lr * gb
                else:
                    order = rng.permutation(n)
                    for start in range(0, n, self.batch_size):
                        idx = order[start:start + self.batch_size]
                        loss, gW, gb = self._loss_and_grad(X[idx], Y[idx], labels[idx])
                        if not math.isfinite(loss):
                            raise DivergenceError(f"non-finite loss at epoch {epoch}")
                        self.coef_ -= self.lr * gW
                        self.intercept_ -= self.lr * gb
        return self

    def predict_proba(self, X):
        return _softmax(np.asarray(X, dtype=float) @ self.coef_.T + self.intercept_)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def predictive_entropy(self, X):
        P = self.predict_proba(X)
        return -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=1)

    def copy(self) -> "SoftmaxHead":
        dup = SoftmaxHead(**self.get_params())
        if hasattr(self, "coef_"):
            dup.coef_ = self.coef_.copy()
            dup.intercept_ = self.intercept_.copy()
            dup.classes_ = self.classes_
        return dup


def train_head(feats, labels, hyper: HeadHyper, init: SoftmaxHead | None = None,
               loss: str = "ce", q: float = 0.0) -> SoftmaxHead:
    """Gradient-descent-trained head from `init` (or zeros)."""
    head = SoftmaxHead(lr=hyper.lr, epochs=hyper.epochs, batch_size=hyper.batch_size,
                       loss=loss, q=q, warm_start=init is not None)
    if init is not None and hasattr(init, "coef_"):
        head.coef_ = init.coef_.copy()
        head.intercept_ = init.intercept_.copy()
    return head.fit(np.asarray(feats, dtype=float), labels)


def entropy_select(head: SoftmaxHead, feats, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * count) lowest-entropy samples.

    Ties break toward the lower sample index (stable sort).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    H = head.predictive_entropy(np.asarray(feats, dtype=float))
    k = math.ceil(fraction * H.shape[0])
    return np.argsort(H, kind="stable")[:k]


def _evaluate(head: SoftmaxHead, feats: np.ndarray, data: ClassifDataset,
              mask: np.ndarray) -> tuple[float, float]:
    """(average accuracy, worst-group accuracy) on the masked rows."""
    pred = head.predict(feats[mask])
    correct = pred == data.c[mask]
    avg = float(np.mean(correct))
    cells = data.cells()[mask]
    worst = 1.0
    for cell in range(4):
        sel = cells == cell
        if sel.any():
            worst = min(worst, float(np.mean(correct[sel])))
    return avg, worst


@dataclass(frozen=True)
class SeedMetrics:
    seed: int
    p: float
    q: float
    teacher_avg: float
    vanilla_avg: float
    enhanced_avg: float
    teacher_wga: float
    vanilla_wga: float
    enhanced_wga: float
    subset_minority_frac: float
    pool_minority_frac: float
    val_vanilla_wga: float
    val_enhanced_wga: float
    val_enhanced_avg: float
    vanilla_equivalent: bool


@dataclass
class _SeedStages:
    """Per-seed shared work: everything before the (p, q)-specific retraining."""

    teacher: SoftmaxHead
    vanilla: SoftmaxHead
    phi_s_unlabeled: np.ndarray
    pseudolabels: np.ndarray
    entropy_order: np.ndarray
    unlabeled: ClassifDataset
    test: ClassifDataset
    phi_t_test: np.ndarray
    phi_s_test: np.ndarray
    test_mask: np.ndarray
    val_mask: np.ndarray
    teacher_metrics: tuple[float, float]
    vanilla_metrics: tuple[float, float]
    vanilla_val: tuple[float, float]


def _run_seed_stages(config: ClassifConfig, geometry: GroupGeometry,
                     seed: int) -> _SeedStages:
    prob = config.problem
    ss = np.random.SeedSequence([seed])
    s_beta, s_lab, s_unl, s_test, s_split = ss.spawn(5)

    beta_star = draw_beta_star(prob.d_z, prob.beta_star_norm,
                               np.random.default_rng(s_beta))
    labeled = gen_classif(config, geometry, prob.eta_l, prob.n, s_lab, beta_star)
    unlabeled = gen_classif(config, geometry, prob.eta_u, prob.N, s_unl, beta_star)
    test = gen_classif(config, geometry, 0.5, config.test_count, s_test, beta_star)

    phi_t_labeled = classif_features(labeled, geometry, "teacher")
    phi_t_unlabeled = classif_features(unlabeled, geometry, "teacher")
    phi_s_unlabeled = classif_features(unlabeled, geometry, "student")
    phi_t_test = classif_features(test, geometry, "teacher")
    phi_s_test = classif_features(test, geometry, "student")

    teacher = train_head(phi_t_labeled, labeled.c, config.hyper)
    pseudo = teacher.predict(phi_t_unlabeled)
    vanilla = train_head(phi_s_unlabeled, pseudo, config.hyper)
    entropy_order = np.argsort(vanilla.predictive_entropy(phi_s_unlabeled),
                               kind="stable")

    n_val = int(round(config.val_frac * test.count))
    val_idx = np.random.default_rng(s_split).permutation(test.count)[:n_val]
    val_mask = np.zeros(test.count, dtype=bool)
    val_mask[val_idx] = True
    test_mask = ~val_mask

    return _SeedStages(
        teacher=teacher, vanilla=vanilla,
        phi_s_unlabeled=phi_s_unlabeled, pseudolabels=pseudo,
        entropy_order=entropy_order, unlabeled=unlabeled, test=test,
        phi_t_test=phi_t_test, phi_s_test=phi_s_test,
        test_mask=test_mask, val_mask=val_mask,
        teacher_metrics=_evaluate(teacher, phi_t_test, test, test_mask),
        vanilla_metrics=_evaluate(vanilla, phi_s_test, test, test_mask),
        vanilla_val=_evaluate(vanilla, phi_s_test, test, val_mask),
    )


def _retrain_cell(config: ClassifConfig, stages: _SeedStages, p: float,
                  q: float, seed: int) -> SeedMetrics:
    k = math.ceil(p * stages.unlabeled.count)
    sel = stages.entropy_order[:k]
    init = None if config.cold_start else stages.vanilla
    loss = "ce" if q == 0.0 else "gce"
    enhanced = train_head(stages.phi_s_unlabeled[sel], stages.pseudolabels[sel],
                          config.hyper, init=init, loss=loss, q=q)
    enh_avg, enh_wga = _evaluate(enhanced, stages.phi_s_test, stages.test,
                                 stages.test_mask)
    val_avg, val_wga = _evaluate(enhanced, stages.phi_s_test, stages.test,
                                 stages.val_mask)
    minority = stages.unlabeled.minority
    return SeedMetrics(
        seed=seed, p=p, q=q,
        teacher_avg=stages.teacher_metrics[0], vanilla_avg=stages.vanilla_metrics[0],
        enhanced_avg=enh_avg,
        teacher_wga=stages.teacher_metrics[1], vanilla_wga=stages.vanilla_metrics[1],
        enhanced_wga=enh_wga,
        subset_minority_frac=float(np.mean(minority[sel])),
        pool_minority_frac=float(np.mean(minority)),
        val_vanilla_wga=stages.vanilla_val[1],
        val_enhanced_wga=val_wga, val_enhanced_avg=val_avg,
        vanilla_equivalent=(p == 1.0 and q == 0.0),
    )


def enhanced_pipeline(config: ClassifConfig, geometry: GroupGeometry, p: float,
                      q: float, seeds) -> list[SeedMetrics]:
    """Teacher -> pseudolabel -> vanilla fine-tune -> entropy-selected GCE
    retraining, one metrics row per seed."""
    if not seeds:
        raise ValueError("seeds must be non-empty")
    cfg = replace(config, select_frac=p, gce_q=q)
    rows = []
    for seed in seeds:
        stages = _run_seed_stages(cfg, geometry, seed)
        rows.append(_retrain_cell(cfg, stages, p, q, seed))
    return rows


@dataclass(frozen=True)
class AblationCell:
    setting: str                      # "a" = (eta_o, 0.5), "b" = (0.5, eta_o)
    p: float
    q: float
    rows: tuple[SeedMetrics, ...]

    @property
    def mean_test_wga(self) -> float:
        return float(np.mean([r.enhanced_wga for r in self.rows]))

    @property
    def mean_test_avg(self) -> float:
        return float(np.mean([r.enhanced_avg for r in self.rows]))

    @property
    def mean_val_wga(self) -> float:
        return float(np.mean([r.val_enhanced_wga for r in self.rows]))


@dataclass(frozen=True)
class AblationSummary:
    setting: str
    cells: tuple[AblationCell, ...]
    best: AblationCell                # by mean validation worst-group accuracy
    ce_only: AblationCell             # best p at q = 0
    full_data: AblationCell           # p = 1, best q
    vanilla_mean_wga: float
    teacher_mean_wga: float


def setting_fractions(setting: str, eta_o: float) -> tuple[float, float]:
    if setting == "a":
        return eta_o, 0.5
    if setting == "b":
        return 0.5, eta_o
    raise ValueError(f"setting must be 'a' or 'b', got '{setting}'")


def ablation_grid(config: ClassifConfig, geometry: GroupGeometry, seeds,
                  settings=("a", "b")) -> dict[str, AblationSummary]:
    """Full (p, q) grid for the requested settings, sharing the teacher and
    vanilla stages across cells within a seed.  (p, q) = (1, 0) is excluded
    from the search space; p = 1 cells are evaluated for the full-data
    ablation."""
    if not seeds:
        raise ValueError("seeds must be non-empty")
    out = {}
    for setting in settings:
        eta_l, eta_u = setting_fractions(setting, config.eta_o)
        cfg = replace(config, problem=replace(config.problem, eta_l=eta_l, eta_u=eta_u))
        search_p = GRID_P_RESTRICTED if setting == "a" else GRID_P
        eval_cells = sorted(
            {(p, q) for p in search_p for q in GRID_Q if (p, q) != (1.0, 0.0)}
            | {(1.0, q) for q in GRID_Q if q != 0.0}
        )

        per_cell: dict[tuple[float, float], list[SeedMetrics]] = {c: [] for c in eval_cells}
        for seed in seeds:
            stages = _run_seed_stages(cfg, geometry, seed)
            for (p, q) in eval_cells:
                per_cell[(p, q)].append(_retrain_cell(cfg, stages, p, q, seed))

        cells = tuple(
            AblationCell(setting=setting, p=p, q=q, rows=tuple(per_cell[(p, q)]))
            for (p, q) in eval_cells
        )
        search_cells = [c for c in cells if c.p in search_p and (c.p, c.q) != (1.0, 0.0)]
        best = max(search_cells, key=lambda c: c.mean_val_wga)
        ce_cells = [c for c in cells if c.q == 0.0 and c.p in search_p]
        ce_only = max(ce_cells, key=lambda c: c.mean_val_wga)
        fd_cells = [c for c in cells if c.p == 1.0]
        full_data = max(fd_cells, key=lambda c: c.mean_val_wga)

        any_rows = cells[0].rows
        out[setting] = AblationSummary(
            setting=setting, cells=cells, best=best, ce_only=ce_only,
            full_data=full_data,
            vanilla_mean_wga=float(np.mean([r.vanilla_wga for r in any_rows])),
            teacher_mean_wga=float(np.mean([r.teacher_wga for r in any_rows])),
        )
    return out


def export_enhance_csv(rows_by_setting: dict[str, list[SeedMetrics]], destination) -> None:
    lines = [ENHANCE_CSV_HEADER]
    for setting, rows in rows_by_setting.items():
        for r in rows:
            lines.append(",".join([
                setting, repr(float(r.p)), repr(float(r.q)), str(r.seed),
                repr(r.teacher_avg), repr(r.vanilla_avg), repr(r.enhanced_avg),
                repr(r.teacher_wga), repr(r.vanilla_wga), repr(r.enhanced_wga),
                repr(r.subset_minority_frac),
            ]))
    with open(destination, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
