from pathlib import Path

import pytest

from mmpoint.config import RunConfig
from mmpoint.core import SeedTree
from mmpoint.dataset import DatasetHandle, build_dataset
from mmpoint.trainer import Trainer

from .fake_source import FakeSource, data_dir


@pytest.fixture
def test_config() -> RunConfig:
    return RunConfig.load(data_dir / "run-config.json")


@pytest.fixture(scope="session")
def test_dataset_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("dataset")
    build_dataset(
        root, classes=4, per_class=4, n_points=128, resolution=32, tree=SeedTree(7), workers=2
    )
    return root


@pytest.fixture
def test_dataset(test_dataset_dir: Path) -> DatasetHandle:
    return DatasetHandle(test_dataset_dir)


@pytest.fixture
def test_trainer(test_config: RunConfig, test_dataset: DatasetHandle) -> Trainer:
    return Trainer(test_config, dataset=test_dataset)


@pytest.fixture
def test_source() -> FakeSource:
    return FakeSource(clouds=10, points=256, classes=5)
