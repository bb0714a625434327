import numpy as np
import pytest

from datasets import center, make_blobs
from heads import LinearHead, TrainConfig, fit_linear_head, train_mlp
from projection import fit_pca, fit_spca, project


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    """Small two-class image task, 6x6 pixels."""
    return make_blobs(240, 60, side=6, classes=2, seed=3)


@pytest.fixture(scope="session")
def blobs3():
    return make_blobs(240, 60, side=6, classes=3, seed=5)


@pytest.fixture(scope="session")
def pca_linear(blobs):
    """PCA projection (r=5) with a trained linear head."""
    train, _ = blobs
    Xc, info = center(train.X)
    projection = fit_pca(Xc, 5, centering=info)
    config = TrainConfig(epochs=30, learning_rate=0.05, batch_size=32, seed=1)
    head, _ = fit_linear_head(project(projection, train.X), train.y, config, num_classes=2)
    return projection, head


@pytest.fixture(scope="session")
def spca_mlp(blobs3):
    train, _ = blobs3
    Xc, info = center(train.X)
    projection = fit_spca(Xc, 4, 0.25, centering=info)
    config = TrainConfig(epochs=10, learning_rate=0.01, batch_size=32, hidden=(12, 8), seed=2)
    head, _ = train_mlp(project(projection, train.X), train.y, config, num_classes=3)
    return projection, head


def random_linear_head(rng, r, K):
    return LinearHead(U=rng.standard_normal((r, K)), biases=rng.standard_normal(K))
