import numpy as np
import pytest

from services.density import ClassMixture, FeatureGrid, ModelHead
from services.synthetic import SyntheticSpec, generate_dataset, make_rng
from services.training import TrainConfig


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_spec():
    return SyntheticSpec(
        num_classes=2, parts_per_class=2, raw_dim=6, height=3, width=3,
        noise_sigma=0.1, train_per_class=8, test_per_class=10, ood_samples=20
    )


@pytest.fixture
def small_dataset(small_spec):
    return generate_dataset(small_spec, seed=7)


@pytest.fixture
def small_train_config():
    return TrainConfig(
        epochs=2, batch_size=4, levels=3, memory_capacity=30,
        num_prototypes=2, prototype_dim=6
    )


def random_grid(rng, height=3, width=3, dim=4, scale=1.0) -> FeatureGrid:
    return FeatureGrid(scale * rng.normal(size=(height, width, dim)))


def random_mixture(rng, class_id=0, num_prototypes=3, dim=4, scale=1.0) -> ClassMixture:
    return ClassMixture(
        class_id=class_id,
        means=scale * rng.normal(size=(num_prototypes, dim)),
        priors=rng.dirichlet(np.ones(num_prototypes))
    )


def random_head(rng, num_classes=3, num_prototypes=3, dim=4, scale=1.0) -> ModelHead:
    return ModelHead(tuple(
        random_mixture(rng, c, num_prototypes, dim, scale) for c in range(num_classes)
    ))
