"""Sampling the synthetic task and materializing Kronecker feature matrices.

Sampling modes for the group feature:

* ``bernoulli`` (default): per-row group label g ~ Bernoulli(eta), then
  xi ~ N(g mu_xi, sigma_xi^2 I) — the literal mixture.
* ``quota``: exactly floor(eta * count) minority rows, same conditional law.
* ``meanshift``: every row gets xi ~ N(eta mu_xi, sigma_xi^2 I); g is still
  drawn Bernoulli(eta) for bookkeeping but is independent of xi.  This is the
  convention under which the closed-form covariance blocks are the exact
  population moments (the mixture adds eta(1-eta) mu mu^T to the group block),
  so theory-vs-simulation sweeps use it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ProblemConfig
from .geometry import GroupGeometry

__all__ = [
    "Dataset",
    "FeatureMatrix",
    "SAMPLING_MODES",
    "draw_beta_star",
    "sample_dataset",
    "features",
    "empirical_group_cov",
    "empirical_cross_cov",
    "save_dataset",
    "load_dataset",
]

SAMPLING_MODES = ("bernoulli", "quota", "meanshift")


@dataclass(frozen=True)
class Dataset:
    """One sampled batch: core features, group features, labels."""

    Z: np.ndarray            # count x d_z
    XiMat: np.ndarray        # count x p
    g: np.ndarray            # count, {0,1}
    y: np.ndarray | None     # count, absent for unlabeled-only use
    beta_star: np.ndarray    # d_z
    eta: float
    mode: str = "bernoulli"

    @property
    def count(self) -> int:
        return self.Z.shape[0]

    @property
    def d_z(self) -> int:
        return self.Z.shape[1]

    def targets(self) -> np.ndarray:
        """Noise-free regression function values z^T beta_star."""
        return self.Z @ self.beta_star


@dataclass(frozen=True)
class FeatureMatrix:
    """Row-per-sample Kronecker features z (x) [1; F^T xi].

    Flat entry k * block_width + j holds z_k * w_j (core index major), so the
    population optimum beta_star (x) e_1 is contiguous per block.
    """

    values: np.ndarray
    block_width: int

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def d_z(self) -> int:
        return self.values.shape[1] // self.block_width

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)


def draw_beta_star(d_z: int, norm: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the sphere of the given radius."""
    v = rng.standard_normal(d_z)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v[0] = 1.0
        nv = 1.0
    return v * (norm / nv)


def sample_dataset(config: ProblemConfig, geometry: GroupGeometry, eta: float,
                   count: int, mode: str = "bernoulli", seed=0,
                   noiseless: bool = False,
                   beta_star: np.ndarray | None = None) -> Dataset:
    """Draw `count` rows from the task distribution at minority fraction eta.

    `seed` may be an int or a numpy SeedSequence; `beta_star` is drawn from
    the same stream when not supplied.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode '{mode}'; expected one of {SAMPLING_MODES}")

    rng = np.random.default_rng(seed)
    if beta_star is None:
        beta_star = draw_beta_star(config.d_z, config.beta_star_norm, rng)
    else:
        beta_star = np.asarray(beta_star, dtype=float)
        if beta_star.shape != (config.d_z,):
            raise ValueError(f"beta_star has shape {beta_star.shape}, expected ({config.d_z},)")

    if mode == "quota":
        n_min = int(np.floor(eta * count))
        g = np.zeros(count, dtype=np.int64)
        g[rng.permutation(count)[:n_min]] = 1
    else:
        g = (rng.random(count) < eta).astype(np.int64)

    Z = rng.standard_normal((count, config.d_z))
    noise_xi = config.sigma_xi * rng.standard_normal((count, config.p))
    if mode == "meanshift":
        XiMat = eta * geometry.mu_xi + noise_xi
    else:
        XiMat = g[:, None] * geometry.mu_xi + noise_xi

    y = Z @ beta_star
    if not noiseless and config.sigma_y > 0:
        y = y + config.sigma_y * rng.standard_normal(count)

    return Dataset(Z=Z, XiMat=XiMat, g=g, y=y, beta_star=beta_star, eta=eta, mode=mode)


def group_block(dataset: Dataset, geometry: GroupGeometry, which: str) -> np.ndarray:
    """Per-sample group block [1; F^T xi] for F in {T, S}."""
    if which == "teacher":
        F = geometry.T
    elif which == "student":
        F = geometry.S
    else:
        raise ValueError(f"which must be 'teacher' or 'student', got '{which}'")
    if dataset.XiMat.shape[1] != F.shape[0]:
        raise ValueError(
            f"dataset group features have dimension {dataset.XiMat.shape[1]}, "
            f"geometry expects {F.shape[0]}"
        )
    return np.column_stack([np.ones(dataset.count), dataset.XiMat @ F])


def features(dataset: Dataset, geometry: GroupGeometry, which: str) -> FeatureMatrix:
    """Kronecker feature matrix for the teacher or student representation."""
    W = group_block(dataset, geometry, which)
    vals = np.einsum("nk,nj->nkj", dataset.Z, W).reshape(dataset.count, -1)
    return FeatureMatrix(values=vals, block_width=W.shape[1])


def empirical_group_cov(dataset: Dataset, geometry: GroupGeometry, which: str) -> np.ndarray:
    """(1/count) sum_i w_i w_i^T over the group blocks."""
    if dataset.count < 2:
        raise ValueError("need at least 2 samples for an empirical covariance")
    W = group_block(dataset, geometry, which)
    return W.T @ W / dataset.count


def empirical_cross_cov(dataset: Dataset, geometry: GroupGeometry) -> np.ndarray:
    """(1/count) sum_i psi_i w_i^T (student block against teacher block)."""
    if dataset.count < 2:
        raise ValueError("need at least 2 samples for an empirical covariance")
    W = group_block(dataset, geometry, "teacher")
    P = group_block(dataset, geometry, "student")
    return P.T @ W / dataset.count


def save_dataset(path, dataset: Dataset, seed: int | None = None) -> None:
    """Columnar export with a small header block."""
    header = np.array(
        [dataset.count, dataset.d_z, dataset.XiMat.shape[1]], dtype=np.int64
    )
    np.savez(
        path,
        header=header,
        eta=np.float64(dataset.eta),
        seed=np.int64(-1 if seed is None else seed),
        mode=np.str_(dataset.mode),
        Z=np.asfortranarray(dataset.Z),
        XiMat=np.asfortranarray(dataset.XiMat),
        g=dataset.g,
        y=np.array([]) if dataset.y is None else dataset.y,
        beta_star=dataset.beta_star,
    )


def load_dataset(path) -> Dataset:
    with np.load(path) as d:
        y = d["y"]
        return Dataset(
            Z=d["Z"].copy(), XiMat=d["XiMat"].copy(), g=d["g"].copy(),
            y=None if y.size == 0 else y.copy(),
            beta_star=d["beta_star"].copy(), eta=float(d["eta"]),
            mode=str(d["mode"]),
        )
