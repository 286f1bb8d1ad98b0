"""Shared fixtures: one small synthetic dataset per test session."""

import pytest

from psigan.config import TrainConfig
from psigan.synthdata import SynthConfig, build_dataset


@pytest.fixture(scope="session")
def smoke_manifest(tmp_path_factory):
    config = SynthConfig(
        seed=0, num_labels=3, canvas=32, source_train=8, target_train=8, target_val=4, target_test=4
    )
    return build_dataset(config, tmp_path_factory.mktemp("smoke"))


@pytest.fixture
def tiny_config():
    return TrainConfig(
        preset="tiny",
        epochs_constant=1,
        epochs_decay=1,
        iterations_per_epoch=2,
        snapshot_samples=2,
    )
