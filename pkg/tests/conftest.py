import os

import numpy as np
import pytest

from fedblocks.client import ClientState, TrainingConfig
from fedblocks.data import SynthTask, TaskKind, dirichlet_partition, generate, train_val_split
from fedblocks.experiment import ExperimentConfig
from fedblocks.model import FusionVariant, ModalityMask, ModelSpec, init_model
from fedblocks.server import AggregationMode, Federation


def pytest_collection_modifyitems(config, items):
    if os.getenv("FEDBLOCKS_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set FEDBLOCKS_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_spec() -> ModelSpec:
    return ModelSpec(input_dims=(4, 3), n_classes=3, embed_dim=3, hidden_dim=5, fusion_dim=4)


@pytest.fixture(params=[FusionVariant.CONCAT, FusionVariant.ATTENTION], ids=["concat", "attention"])
def fusion_spec(request) -> ModelSpec:
    return ModelSpec(input_dims=(4, 3), n_classes=3, embed_dim=3, hidden_dim=5, fusion_dim=4, fusion=request.param)


@pytest.fixture
def small_batch(small_spec):
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((6, small_spec.input_dims[0]))
    x1 = rng.standard_normal((6, small_spec.input_dims[1]))
    labels = rng.integers(0, small_spec.n_classes, size=6)
    return x0, x1, labels


@pytest.fixture
def small_dataset():
    task = SynthTask(TaskKind.COMPLEMENTARY, n_classes=3, input_dims=(4, 3), noise_scale=0.2, n_samples=300)
    return generate(task, seed=11)


@pytest.fixture
def small_federation(small_dataset, small_spec):
    """Four clients (m0, m1, m0+m1, m0+m1) on a Dirichlet split, PH mode."""

    def make(mode: AggregationMode = AggregationMode.PH, rounds: int = 3, **kwargs) -> Federation:
        train_idx, val_idx = train_val_split(small_dataset.labels, 0.2, seed=1)
        train, validation = small_dataset.subset(train_idx), small_dataset.subset(val_idx)
        plan = dirichlet_partition(train.labels, n_clients=4, alpha=1.0, seed=3)
        masks = [
            ModalityMask((True, False)),
            ModalityMask((False, True)),
            ModalityMask((True, True)),
            ModalityMask((True, True)),
        ]
        clients = [ClientState(c, masks[c], plan.indices[c], seed=100 + c) for c in range(4)]
        return Federation(
            spec=small_spec,
            train=train,
            clients=clients,
            mode=mode,
            hyper=kwargs.pop("hyper", TrainingConfig(epochs=1, lr=0.1, batch_size=16)),
            rounds=rounds,
            validation=validation,
            **kwargs,
        )

    return make


@pytest.fixture
def initial_model(small_spec):
    return init_model(small_spec, seed=5)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.from_dict(
        {
            "task": {"kind": "complementary", "n_classes": 3, "input_dims": [4, 4], "n_samples": 240},
            "model": {"embed_dim": 4, "hidden_dim": 6, "fusion_dim": 4},
            "federation": {"n_clients": 4, "rounds": 3, "batch_size": 16, "lr": 0.1},
            "data": {"split": "niid", "alpha": 1.0},
            "experiment": {"name": "tiny", "modality_config": "1-1-2", "modes": ["FM", "PH", "PHF"], "seeds": [0], "final_window": 2},
        }
    )
