import numpy as np
import pytest
import torch

from molsys import MoleculeCloud, PocketCloud
from net import NetConfig, ParameterSet
from oracle import GenConfig, generate_dataset
from schedule import build_schedule


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def perturbed(params, scale=0.05, seed=0):
    """Copy of a parameter set with every weight shifted, so zero initialized heads become active."""

    rng = np.random.default_rng(seed)
    return ParameterSet(params.config, params.flat + scale * rng.normal(size=params.flat.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_schedule():
    return build_schedule(10, 1e-4, 2e-2, 6.0)


@pytest.fixture
def desk_schedule():
    return build_schedule(100, 1e-7, 0.2, 6.0)


@pytest.fixture
def pocket():
    """Octahedral shell of radius 4.5 Angstrom around (1, 2, 3)."""

    directions = np.array([
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 1], [-1, -1, 1], [1, -1, -1], [-1, 1, -1],
    ], dtype=float)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    x = 4.5 * directions + np.array([1.0, 2.0, 3.0])
    symbols = ["C", "N", "O", "C", "S", "C", "O", "C", "N", "C"]
    return PocketCloud.from_symbols(symbols, x)


@pytest.fixture
def ethanol():
    """C-C-O chain with realistic bond lengths."""

    x = np.array([[0.0, 0.0, 0.0], [1.52, 0.0, 0.0], [2.03, 1.35, 0.0]])
    return MoleculeCloud.from_symbols(["C", "C", "O"], x)


@pytest.fixture
def ligand_in_pocket(pocket):
    x = np.array([[0.0, 0.0, 0.0], [1.52, 0.0, 0.0], [2.03, 1.35, 0.0], [-0.6, -1.3, 0.3]]) + pocket.center - 0.7
    return MoleculeCloud.from_symbols(["C", "C", "O", "N"], x)


@pytest.fixture
def denoiser_params():
    return ParameterSet.initialize(NetConfig(role="denoiser", layers=2, hidden_dim=8, k_nn=4))


@pytest.fixture
def cfg_denoiser_params():
    return ParameterSet.initialize(NetConfig(role="denoiser", layers=2, hidden_dim=8, k_nn=4, cond_channels=2))


@pytest.fixture
def regressor_params():
    return ParameterSet.initialize(NetConfig(role="regressor", layers=2, hidden_dim=8, k_nn=4), seed=3)


@pytest.fixture
def multi_regressor_params():
    return ParameterSet.initialize(NetConfig(role="regressor", layers=2, hidden_dim=8, k_nn=4, out_dim=3), seed=4)


@pytest.fixture(scope="session")
def small_gen_config():
    return GenConfig(n_ligand_min=5, n_ligand_max=8, n_pocket_min=12, n_pocket_max=20)


@pytest.fixture(scope="session")
def small_dataset(small_gen_config):
    return generate_dataset(7, 6, small_gen_config)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
