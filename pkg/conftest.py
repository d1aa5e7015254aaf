"""Shared fixtures: the small chain instances and a random-MDP factory."""

from pathlib import Path

import numpy as np
import pytest

from lowerbound_instances import ChainSpec, make_chain
from mdp_core import Mdp, RewardDist

ROOT = Path(__file__).parent
INSTANCES = ROOT / "instances"


def random_mdp(rng: np.random.Generator, n: int, k: int, gamma: float) -> Mdp:
    """Dirichlet rows, Bernoulli rewards."""
    P = rng.dirichlet(np.ones(n), size=(n, k))
    rewards = tuple(RewardDist.bernoulli(float(p)) for p in rng.uniform(0.0, 1.0, size=n))
    return Mdp(P, rewards, gamma)


@pytest.fixture
def chain3():
    """M(1), n=3, k=2, gamma=0.9."""
    return make_chain(ChainSpec(3, 2, 1.0, 0.9))


@pytest.fixture
def chain3_half():
    """M(0.5), n=3, k=2, gamma=0.9."""
    return make_chain(ChainSpec(3, 2, 0.5, 0.9))


@pytest.fixture
def make_random_mdp():
    return random_mdp


@pytest.fixture
def a5_path():
    return INSTANCES / "a5_four_state.json"
