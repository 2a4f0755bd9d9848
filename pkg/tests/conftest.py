import numpy as np
import pytest

from w2slab.config import GeometryTargets, ProblemConfig
from w2slab.geometry import build_geometry


@pytest.fixture(scope="session")
def base_problem():
    """Desk-scale task at the default sweep-panel parameters."""
    return ProblemConfig(
        d_z=64, p=4, p_T=3, p_S=2, sigma_y=1.0, sigma_xi=1.0,
        eta_l=0.1, eta_u=0.1, eta_t=0.5, n=512, N=1280,
    )


@pytest.fixture(scope="session")
def base_targets():
    return GeometryTargets(xi_frob_sq=0.2, mu_T_sq=10.0, mu_S_sq=0.1)


@pytest.fixture(scope="session")
def base_geometry(base_problem, base_targets):
    return build_geometry(base_problem, base_targets, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
