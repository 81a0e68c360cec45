import numpy as np
import pytest

from ipsgp.covfunc import MaternParams
from ipsgp.gp import Hyperparameters
from ipsgp.systems import TrajectoryDataset, builtin_system, generate_dataset
from ipsgp.trainer import TrainConfig, minimize_nlml

CS_TRAINABLE = ("s2_E", "omega_E", "s2_A", "omega_A", "alpha")


def toy_dataset(z=(0.0, 0.0)):
    """Two agents on a line, one snapshot: x = (0, 1), v = (0, 1)."""
    Y = np.array([0.0, 1.0, 0.0, 1.0])
    return TrajectoryDataset(1, 2, 1, 1, np.zeros(1), Y, np.asarray(z, dtype=float))


def random_dataset(rng, d=2, N=4, M=2, L=2, box=2.0):
    """Random states and accelerations; no dynamics behind them."""
    Y = rng.uniform(-box, box, size=(M, L, 2 * d * N))
    Z = rng.standard_normal((M, L, d * N))
    times = np.arange(L, dtype=float)
    return TrajectoryDataset(d, N, M, L, times, Y, Z)


def hyper_for(spec, **kw):
    base = dict(
        theta_E=MaternParams(1.0, 1.0, 1.5),
        theta_A=MaternParams(1.0, 1.0, 1.5),
        sigma=0.0,
        alpha=spec.alpha,
        mass=spec.mass,
        force=spec.force,
    )
    base.update(kw)
    return Hyperparameters(**base)


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture(scope="session")
def cs_spec():
    return builtin_system("CS")


@pytest.fixture(scope="session")
def cs_trained(cs_spec):
    """Noise-free CS {10, 3, 3} dataset and its fitted hyperparameters (seed 0)."""
    ds = generate_dataset(cs_spec, 3, 3, 0.0, seed=0)
    h0 = hyper_for(cs_spec, trainable=CS_TRAINABLE)
    res = minimize_nlml(ds, TrainConfig(h0, seed=0))
    return ds, res
