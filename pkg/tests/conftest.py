import numpy as np
import pytest

from crossflux.mesh import build_structured_mesh
from crossflux.model import BoundaryData, ModelConfig

ALL_NEUMANN = {"left": "N", "right": "N", "bottom": "N", "top": "N"}
LEFT_RIGHT_D = {"left": "D", "right": "D", "bottom": "N", "top": "N"}


@pytest.fixture
def two_cells():
    """Two unit squares sharing one vertical edge (tau = 1), all Neumann."""
    return build_structured_mesh(2, 1, (0.0, 2.0, 0.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_config(mesh, z, D=None, beta=1.0, lambda2=1.0, background=0.0, immobile=0.0, drift=True):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    D = np.ones_like(z) if D is None else D
    return ModelConfig.uniform(mesh.n_cells, z, D, beta=beta, lambda2=lambda2, background=background,
                               immobile=immobile, drift_enabled=drift)


def random_simplex(rng, shape, n, low=0.02, total=0.9):
    """Random interior points with every species >= low and sum <= total."""
    w = rng.dirichlet(np.ones(n + 1), size=shape)
    return low + (total - (n + 1) * low) * w[..., :n]


def random_boundary(rng, mesh, n, phi_scale=1.0):
    nd = mesh.n_dirichlet
    return BoundaryData(random_simplex(rng, nd, n), phi_scale * rng.normal(size=nd))
