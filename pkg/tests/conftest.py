import numpy as np
import pytest

from sense.datasets import LabeledSet, make_rng, sample
from sense.distributions import ThreeClusters
from sense.models import Model, ModelSpec, build_model


def binomial_band(r: float, n: int, k: float = 4.0) -> float:
    """k binomial standard errors around a rate r, floored for rates at 0 or 1."""
    return k * np.sqrt(max(r * (1 - r), 1.0 / n) / n)


@pytest.fixture
def rng():
    return make_rng(0, "tests")


@pytest.fixture
def linear2():
    """Two-class linear model with logit gap 2x₁ + x₂ − 0.2."""
    spec = ModelSpec.linear(2, 2)
    return Model(spec, {"fc0.weight": [[-1.0, -0.5], [1.0, 0.5]], "fc0.bias": [0.1, -0.1]})


@pytest.fixture
def tiny_mlp():
    return build_model(ModelSpec.mlp((2, 8, 3), seed=1))


@pytest.fixture
def tiny_cnn():
    return build_model(ModelSpec.cnn(1, num_classes=3, seed=2, image_size=16))


@pytest.fixture
def clusters():
    return sample(ThreeClusters(p=0.55, sigma=0.2, m=7.0), 200, seed=0)


@pytest.fixture
def points(rng):
    x = rng.uniform(-1, 1, size=(40, 2))
    y = (x[:, 0] + 0.3 * x[:, 1] > 0).astype(np.int64)
    return LabeledSet(x, y)


@pytest.fixture
def band():
    return binomial_band
