"""Shared fixtures: small deterministic scene datasets and model configs."""

import numpy as np
import pytest
import torch

from flowcast.scene import (
    SceneGenConfig,
    SceneRecord,
    fit_normalizer,
    generate_scene,
    scene_seeds,
)
from flowcast.trainer import TrainConfig, TrainData


@pytest.fixture(scope="session")
def gen_config() -> SceneGenConfig:
    return SceneGenConfig()


@pytest.fixture(scope="session")
def records(gen_config) -> list[SceneRecord]:
    """Sixteen deterministic scenes shared across tests."""
    out = []
    for i, seed in enumerate(scene_seeds(1234, 16)):
        context, future = generate_scene(int(seed), gen_config)
        out.append(SceneRecord(f"scene-{i:06d}", context, future))
    return out


@pytest.fixture(scope="session")
def train_data(records) -> TrainData:
    normalizer = fit_normalizer([r.future for r in records])
    return TrainData.from_records(records, normalizer)


@pytest.fixture(scope="session")
def tiny_train_config() -> TrainConfig:
    """Fast-training configuration used by trainer/CLI tests."""
    return TrainConfig(
        epochs=2,
        batch_size=8,
        peak_lr=1e-3,
        enc_layers=1,
        enc_dim=32,
        enc_heads=2,
        dec_layers=1,
        dec_dim=32,
        dec_heads=2,
        time_embed_dim=8,
        holdout_fraction=0.25,
    )


@pytest.fixture()
def torch_gen() -> torch.Generator:
    return torch.Generator().manual_seed(20240901)


@pytest.fixture()
def np_rng() -> np.random.Generator:
    return np.random.default_rng(20240901)
