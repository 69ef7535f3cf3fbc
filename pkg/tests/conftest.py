"""Shared small-scale fixtures; trained models are built once per session."""
import numpy as np
import pytest

from ltx.data import Dataset, gen_synthetic, train_val_split
from ltx.models import Explained, ModelSpec, train_explained
from ltx.training import PretrainConfig, pretrain


@pytest.fixture(scope="session")
def small_corpus():
    return Dataset.from_samples(gen_synthetic(320, seed=5), 4)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return train_val_split(small_corpus)


@pytest.fixture(scope="session")
def trained_patchformer(small_split):
    train, _ = small_split
    ckpt, acc = train_explained(train, ModelSpec(), epochs=8, seed=1)
    return ckpt, acc


@pytest.fixture(scope="session")
def trained_cnn(small_split):
    train, _ = small_split
    ckpt, acc = train_explained(train, ModelSpec(family="cnn"), epochs=8, seed=1)
    return ckpt, acc


@pytest.fixture(scope="session")
def explained(trained_patchformer):
    return Explained.from_checkpoint(trained_patchformer[0])


@pytest.fixture(scope="session")
def pretrained_run(trained_patchformer, small_split):
    train, val = small_split
    cfg = PretrainConfig(epochs=3, seed=2)
    return pretrain(trained_patchformer[0], train.images, val.images[:64], cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
