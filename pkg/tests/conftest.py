"""Shared fixtures and the --run-slow switch.

Module Information:
    - Filename: conftest.py
    - Location: tests/

Slow tests train and attack small models end to end; they are skipped
unless pytest is given ``--run-slow``.
"""

import pytest

from task_blocking.data import SynthConfig, gen_synthetic, split_dataset
from task_blocking.models import init_mlp


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_data():
    """A 16-dimensional, 4-way desired / 2-way harmful dataset of 200 rows."""
    return gen_synthetic(SynthConfig(input_dim=16, size=200, seed=0))


@pytest.fixture
def tiny_splits(tiny_data):
    return split_dataset(tiny_data, seed=0)


@pytest.fixture
def tiny_extractor():
    return init_mlp((16, 8, 4), seed=0)
