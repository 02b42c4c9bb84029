import numpy as np
import pytest

from patternid.corpus import CorpusConfig, build_dataset
from patternid.mining import BatchSpec, MiningConfig
from patternid.net import ModelConfig
from patternid.train import TrainConfig


SMALL_CORPUS = CorpusConfig(
    individuals=8,
    views_per_individual=4,
    image_size=(32, 32),
    seed=11,
    folds=4,
    spot_count_range=(4, 9),
)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "small"
    return build_dataset(SMALL_CORPUS, root)


def tiny_train_config(**kw) -> TrainConfig:
    """Fast-but-real training config for loop tests."""
    defaults = dict(
        steps=3,
        seed=5,
        batch=BatchSpec(p=4, k=2),
        mining=MiningConfig(margin=0.2),
        model=ModelConfig(conv_channels=(4, 8), embedding_dim=32),
        eval_every=3,
        fold=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
