from __future__ import annotations

import pytest

from tcsdistill.scenegen import GenConfig, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running benchmark criteria")


@pytest.fixture(scope="session")
def tiny_data():
    """Small train/val split shared by trainer, evalkit and cli tests."""
    cfg = GenConfig(n_train=16, n_val=8)
    return generate_dataset(cfg, 5, "train", 16), generate_dataset(cfg, 5, "val", 8)
