import numpy as np
import pytest

from relguide.data import GeneratorConfig, generate


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


@pytest.fixture(scope="session")
def tiny_dataset():
    """24 train + 12 val samples at the default generator settings."""
    train = generate(GeneratorConfig(samples_per_class=12, seed=101))
    val = generate(GeneratorConfig(samples_per_class=6, seed=101), id_offset=1_000_000)
    return train, val
