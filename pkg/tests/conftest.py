import numpy as np
import pytest

from mrdd.config import EvalConfig, ExperimentConfig, MineConfig, NetConfig, StageConfig
from mrdd.database import init_database
from mrdd.services.data import build_dataset, make_synthetic_dataset


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("MRDD_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture(autouse=True)
def registry():
    """Fresh in-memory run registry per test."""
    assert init_database("sqlite://")
    yield


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    views, labels, names = make_synthetic_dataset(n_samples=96, n_classes=4, image_size=32, seed=0)
    dataset = build_dataset("toy", views, labels, names, ["identity", "edge"], recipe="synthetic", split_seed=0)
    return dataset.save(tmp_path_factory.mktemp("data") / "toy")


@pytest.fixture
def toy_dataset(toy_dataset_dir):
    from mrdd.services.data import MultiViewDataset
    return MultiViewDataset.load(toy_dataset_dir)


@pytest.fixture
def tiny_config(toy_dataset_dir, output_root):
    stage = StageConfig(epochs=2, batch_size=32, lr=1e-3)
    return ExperimentConfig(
        name="toy",
        dataset=str(toy_dataset_dir),
        d_c=4,
        d_s=3,
        stage1=stage,
        stage2=stage,
        nets=NetConfig(base_channels=4, dropout=0.0, club_hidden=[16]),
        mine=MineConfig(hidden=[16], batch_size=16, epochs=2, repeats=2, tail_epochs=1),
        eval=EvalConfig(runs=2, selectors=["c", "cs1"]),
        output_dir=str(output_root),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
