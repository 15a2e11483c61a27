import numpy as np
import pytest

from dice import model as M
from dice.data import synth_classification, synth_regression
from dice.engine import TrainConfig, run_training
from dice.topology import build_ring, uniform_mixing


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scalar_shards(values, per_node=4):
    """One-feature regression shards; node k holds ``per_node`` copies of ``(1, values[k])``."""
    from dice.data import NodeDataset

    return [NodeDataset(k, np.ones((per_node, 1)), np.full(per_node, float(v))) for k, v in enumerate(values)]


SCALAR = M.ModelSpec("linear-regression", (1, 1), bias=False)


@pytest.fixture(scope="session")
def small_mlp_trace():
    shards, ev = synth_classification(4, 32, 5, 3, seed=3, n_eval=40)
    topo = build_ring(4)
    m = M.ModelSpec("mlp", (5, 6, 3), activation="tanh")
    cfg = TrainConfig(rounds=8, lr=0.1, batch_size=8, seed=3)
    return run_training(cfg, topo, uniform_mixing(topo), shards, m), ev


@pytest.fixture(scope="session")
def linreg_trace():
    shards, ev = synth_regression(3, 16, 4, seed=5)
    topo = build_ring(3)
    m = M.ModelSpec("linear-regression", (4, 1))
    cfg = TrainConfig(rounds=6, lr=0.05, batch_size=4, seed=5)
    return run_training(cfg, topo, uniform_mixing(topo), shards, m), ev
