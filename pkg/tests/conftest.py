import numpy as np
import pytest

from manifold import make_frame
from models import BlockQuadratic, NoiseSpec, QuadraticValley, SoftmaxLabelNoise
from streams import NoiseStreams


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def streams():
    return NoiseStreams(7)


@pytest.fixture
def valley():
    return QuadraticValley(NoiseSpec("isotropic", 1.0))


@pytest.fixture
def aligned_valley():
    return QuadraticValley(NoiseSpec("hessian_aligned", 1.0))


@pytest.fixture
def block():
    return BlockQuadratic([1.0, 2.0], 4)


@pytest.fixture(scope="session")
def softmax():
    return SoftmaxLabelNoise.synthetic()


@pytest.fixture
def valley_frame(valley):
    return make_frame(valley, np.array([0.0, 1.0]), eta_h=0.5)
