import numpy as np
import pytest
import torch

from icaf.data import GeneratorSpec, generate_synthetic_dataset
from icaf.segnet import ModelConfig

TINY_MODEL = dict(widths=(4, 8), output_stride=2, decoder_channels=4, wgu_widths=(4, 4, 4))


def tiny_model_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **kw})


def tiny_overrides(**extra) -> dict:
    """Config overrides for seconds-long training runs on the tiny dataset."""
    base = {
        "generator.image_size": [32, 32],
        "model.widths": [4, 8],
        "model.output_stride": 2,
        "model.decoder_channels": 4,
        "model.wgu_widths": [4, 4, 4],
        "train.image_size": [16, 16],
        "train.O": 3,
        "train.P": 2,
        "train.Q": 2,
        "train.labeled_per_batch": 2,
        "train.unlabeled_per_batch": 2,
        "train.epochs": 1,
        "train.base_lr": 0.01,
        "data.labeled_ratio": 0.34,
        "loss.tau": 0.4,
    }
    base.update(extra)
    return base


@pytest.fixture(scope="session")
def tiny_spec():
    return GeneratorSpec(n_groups=6, n_test_groups=2, views_per_group=4, image_size=(32, 32),
                         illumination_angles=[0.0, 90.0, 180.0, 270.0], seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_spec):
    root = tmp_path_factory.mktemp("tiny_ds")
    return generate_synthetic_dataset(tiny_spec, root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
