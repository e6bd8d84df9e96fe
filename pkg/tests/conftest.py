"""Pytest fixtures for epicurve tests."""

import os
import sys
import pytest

# Add project root and tools to path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)
sys.path.insert(0, os.path.join(PROJECT_ROOT, 'tools'))

CONFIG_DIR = os.path.join(PROJECT_ROOT, 'configs')


@pytest.fixture
def rng():
    """Fresh master stream with a fixed seed."""
    from models import make_rng
    return make_rng(12345)


@pytest.fixture
def markov_sir():
    """beta = 2, gamma = 1: lambda = 1, R0 = 2."""
    from models import MarkovSIR
    return MarkovSIR(2.0, 1.0)


@pytest.fixture
def count_times_uniform():
    """Poisson(2) contacts at Uniform(0, 1) times."""
    from models import CountTimes, Poisson, Uniform
    return CountTimes(Poisson(2.0), Uniform(0.0, 1.0))


@pytest.fixture
def two_type():
    """Symmetric two-type model with lambda = 1."""
    from models import Exponential, Multitype
    return Multitype.build([0.5, 0.5], [[1.5, 0.5], [0.5, 1.5]], Exponential(1.0))


@pytest.fixture
def volz_regular():
    """Volz SIR on a 3-regular graph, alpha = 1, beta = 0.5."""
    from models import Configuration
    return Configuration.volz(1.0, 0.5, [0.0, 0.0, 1.0])


@pytest.fixture
def volz_heterogeneous():
    """Volz SIR with degrees 1..4."""
    from models import Configuration
    return Configuration.volz(1.0, 0.5, [0.2, 0.3, 0.3, 0.2])


@pytest.fixture
def reed_frost():
    from models import ReedFrost
    return ReedFrost(2.0)


@pytest.fixture
def config_path():
    """Absolute path of a bundled run config."""
    return lambda name: os.path.join(CONFIG_DIR, name)
