"""Shared fixtures for the replication tests"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).parent))

from body_mesh import TemplateSpec
from graph_autoencoder import TrainConfig
from synth_cohort import default_group_configs, sample_groups


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow Monte-Carlo check; set RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_template():
    return TemplateSpec(rings=8, segments=8)


@pytest.fixture(scope="session")
def small_cohort(small_template):
    """Two arms of 60 subjects on a coarse template"""
    return sample_groups(60, default_group_configs(), seed=3, template=small_template)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(d=2, epochs=5, batch_size=16, hidden=(16, 8), seed=0)
