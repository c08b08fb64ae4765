import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gml_lt import TrainConfig, exponential_profile, synthesize_gaussian, uniform_profile  # noqa: E402


@pytest.fixture(scope="session")
def small_lt_task():
    """5 classes, imbalance 100, plus a balanced test split sharing the class means."""
    profile = exponential_profile(5, 200, 100)
    train = synthesize_gaussian(profile, 8, 3.0, seed=11)
    test = synthesize_gaussian(uniform_profile(5, 40), 8, 3.0, seed=11, stream=1)
    return train, test


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=6, batch_size=64, lr_decay_epoch=4, seed=0)
