import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from convshare.model import ConvShareViT  # noqa: E402
from convshare.training import ScheduleConfig, ToyDataset, toy_model_config, train  # noqa: E402

# desk-scale learning run shared by the heatmap test and the acceptance suite
TOY_TRAIN = dict(kind="quadrant-blob", image_size=16, count=512, seed=0)
TOY_VAL = dict(kind="quadrant-blob", image_size=16, count=256, seed=1)
TOY_SCHEDULE = ScheduleConfig(base_lr=1e-3, warmup_epochs=5, total_epochs=50)
TOY_BATCH = 64


def run_toy(qkv_padding):
    train_set, val_set = ToyDataset(**TOY_TRAIN), ToyDataset(**TOY_VAL)
    model = ConvShareViT(toy_model_config(train_set, qkv_padding=qkv_padding), seed=0)
    t0 = time.perf_counter()
    result = train(model, train_set.generate(), val_set.generate(), TOY_SCHEDULE, seed=0,
                   batch_size=TOY_BATCH)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_runs():
    """Lazily trained {shared, valid} / {shared, same} runs, keyed by padding."""
    cache = {}

    def get(padding):
        if padding not in cache:
            cache[padding] = run_toy(padding)
        return cache[padding]

    return get


@pytest.fixture(scope="session")
def trained_toy(toy_runs):
    result, _ = toy_runs("valid")
    dataset = ToyDataset(**TOY_VAL)
    images, labels = dataset.generate()
    return result.model, dataset, images[:32], labels[:32]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
