import os
from pathlib import Path

import numpy as np
import pytest

from dwvit.config import DatasetSpec, ModelConfig, RunConfig, TrainConfig
from dwvit.presets import model_preset
from dwvit.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def desk_config() -> ModelConfig:
    return model_preset("desk", "kernel3")


@pytest.fixture
def small_config() -> ModelConfig:
    """Quick to build and run: 16x16 images, 4x4 grid, dim 16."""
    return ModelConfig(image_size=16, patch_size=4, dim=16, depth=2, heads=2, num_classes=4)


@pytest.fixture
def small_run(small_config) -> RunConfig:
    return RunConfig(
        model=small_config,
        train=TrainConfig(epochs=3, warmup_epochs=1, batch_size=32, base_lr=1e-3),
        data=DatasetSpec(
            num_classes=4,
            image_size=16,
            synthetic_train_size=96,
            synthetic_test_size=48,
            seed=3,
        ),
    )


def write_cifar_file(path: Path, labels, pixels=None) -> None:
    """One binary batch: a label byte followed by 3072 pixel bytes per record."""
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels is None:
        pixels = np.zeros((len(labels), 3072), dtype=np.uint8)
    records = np.concatenate([labels[:, None], pixels.reshape(len(labels), 3072)], axis=1)
    records.astype(np.uint8).tofile(path)


@pytest.fixture
def cifar_dir(tmp_path) -> Path:
    """Well-formed miniature CIFAR-10 tree: 20 records per train file, 10 in the test file."""
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    rng = make_rng(5)
    for i in range(1, 6):
        labels = np.arange(20) % 10
        pixels = rng.integers(0, 256, size=(20, 3072), dtype=np.uint8)
        write_cifar_file(root / f"data_batch_{i}.bin", labels, pixels)
    write_cifar_file(root / "test_batch.bin", np.arange(10) % 10)
    return tmp_path


@pytest.fixture
def real_cifar_dir() -> Path:
    root = os.environ.get("DWVIT_CIFAR10")
    if not root:
        pytest.skip("DWVIT_CIFAR10 does not point at the CIFAR-10 binary batches")
    return Path(root)
