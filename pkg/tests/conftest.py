"""Shared fixtures."""

import numpy as np
import pytest

from partialbnn.data import Dataset, make_synthetic


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add the slow test switch."""
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="Run desk-scale training tests.",
    )


def pytest_configure(config: pytest.Config) -> None:
    """Register markers."""
    config.addinivalue_line("markers", "slow: desk-scale training run")


def pytest_collection_modifyitems(
    config: pytest.Config,
    items: list[pytest.Item],
) -> None:
    """Skip slow tests unless asked for."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def tiny_synthetic() -> Dataset:
    """Small noisy synthetic dataset at 16x16."""
    return make_synthetic(20, 0.05, seed=3, image_size=16)
