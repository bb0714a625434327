"""Checks against the real MNIST / CIFAR-10 files; skipped unless MNIST_DIR / CIFAR_DIR are set."""

import os

import numpy as np
import pytest

from attacks import AttackConfig, fgsm, mim, pgd, robust_accuracy
from certificates import ThreatModel, certify_dataset
from datasets import center, load_cifar_dir, load_mnist_dir
from heads import Classifier, TrainConfig, fit_linear_head, train_mlp
from projection import fit_pca, fit_spca, project, sparsity_report

MNIST_DIR = os.getenv("MNIST_DIR")
CIFAR_DIR = os.getenv("CIFAR_DIR")

needs_mnist = pytest.mark.skipif(not MNIST_DIR, reason="MNIST_DIR not set")
needs_cifar = pytest.mark.skipif(not CIFAR_DIR, reason="CIFAR_DIR not set")


@pytest.fixture(scope="module")
def mnist():
    return load_mnist_dir(MNIST_DIR)


@pytest.mark.dataset
@needs_mnist
class TestMnist:

    def test_counts(self, mnist):
        train, test = mnist
        assert (train.N, test.N, train.D) == (60000, 10000, 784)
        assert train.image_shape == (28, 28)

    def test_spca_density(self, mnist):
        train, _ = mnist
        Xc, _ = center(train.X[:5000])
        report = sparsity_report(fit_spca(Xc, 10, 0.05))
        densities = report.row_nonzeros / train.D
        assert np.all((densities >= 0.04) & (densities <= 0.06))

    @pytest.mark.parametrize("p", ["inf", "2"])
    def test_no_flips_inside_certified_radius(self, mnist, p):
        train, test = mnist
        train = train.head(10000)
        Xc, info = center(train.X)
        projection = fit_pca(Xc, 100, centering=info)
        config = TrainConfig(epochs=10, learning_rate=0.01, batch_size=128, seed=0)
        head, _ = fit_linear_head(project(projection, train.X), train.y, config, num_classes=10)
        model = Classifier(projection=projection, head=head)
        subset = test.head(200)
        flips = 0
        for rec in certify_dataset(projection, head, subset, p):
            if not rec.correct or rec.radius == 0.0:
                continue
            threat = ThreatModel(p=p, epsilon=0.99 * rec.radius)
            x, y = subset.X[rec.index], rec.label
            for attack in (fgsm(model, x, y, threat, clip=False),
                           pgd(model, x, y, threat, clip=False),
                           mim(model, x, y, threat, clip=False)):
                flips += int(attack.success)
        assert flips == 0


@pytest.mark.dataset
@needs_cifar
def test_cifar_binary_counts():
    train, test = load_cifar_dir(CIFAR_DIR)
    assert (train.N, test.N, train.D) == (10000, 2000, 1024)
    assert train.K == 2


@pytest.fixture(scope="module")
def mnist_pair(mnist):
    """PCA and SPCA (5% density) MLP models at r=200 on a 10,000-image training subset."""
    train, test = mnist
    train = train.head(10000)
    Xc, info = center(train.X)
    config = TrainConfig(epochs=20, learning_rate=1e-3, batch_size=128, hidden=(256, 128), seed=0)
    models = {}
    for kind, projection in (("pca", fit_pca(Xc, 200, centering=info)),
                             ("spca", fit_spca(Xc, 200, 0.05, centering=info))):
        head, _ = train_mlp(project(projection, train.X), train.y, config, num_classes=10)
        models[kind] = (projection, head)
    return models, test.head(1000)


@pytest.mark.dataset
@needs_mnist
class TestMnistTrends:

    def test_clean_accuracy_parity(self, mnist_pair):
        models, test = mnist_pair
        clean = {
            kind: float(np.mean(Classifier(projection=p, head=h).predict(test.X) == test.y))
            for kind, (p, h) in models.items()
        }
        assert abs(clean["pca"] - clean["spca"]) <= 0.02

    def test_sparse_projection_resists_fgsm(self, mnist_pair):
        models, test = mnist_pair

        def acc(kind, eps):
            config = AttackConfig(kind="fgsm", threat=ThreatModel(p="inf", epsilon=eps))
            return robust_accuracy(*models[kind], test, config)

        assert acc("spca", 0.1) - acc("pca", 0.1) >= 0.05
        assert acc("spca", 0.2) >= 0.5
        assert acc("pca", 0.2) <= 0.3
