"""Shared fixtures: a small synthetic dataset and models trained on it.

Session-scoped so the expensive trainings run once per pytest invocation.
"""

import numpy as np
import pytest

from mvmark.data import make_blobs, split_stratified
from mvmark.models import ModelSpec, TrainConfig, train_supervised


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(n_per_class=60, num_classes=4, dim=6, seed=7)


@pytest.fixture(scope="session")
def blob_splits(blobs):
    left, right = split_stratified(blobs, 0.5, seed=3)
    return left, right


@pytest.fixture(scope="session")
def blob_spec():
    return ModelSpec("mlp", num_classes=4, feature_dim=8, input_shape=(6,),
                     widths=(16,))


@pytest.fixture(scope="session")
def blob_train_config():
    return TrainConfig(epochs=20, batch_size=32, lr_initial=0.1,
                       lr_decay_every=10, seed=0)


@pytest.fixture(scope="session")
def blob_model(blobs, blob_spec, blob_train_config):
    return train_supervised(blob_spec, blobs, blob_train_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
