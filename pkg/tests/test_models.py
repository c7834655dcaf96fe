import numpy as np
import pytest
from numpy.testing import assert_allclose

from exceptions import ConfigError, DomainError, NonFiniteError
from models import (
    BlockQuadratic,
    ModelSpec,
    NoiseSpec,
    QuadraticValley,
    build_model,
    eval_grad,
    eval_hessian,
    eval_loss,
    sample_stoch_grad,
    third_contract,
)
from streams import NoiseStreams, bounded_normal


def fd_grad(model, theta, h=1e-6):
    out = np.zeros(model.dim)
    for i in range(model.dim):
        e = np.zeros(model.dim)
        e[i] = h
        out[i] = (eval_loss(model, theta + e) - eval_loss(model, theta - e)) / (2 * h)
    return out


def fd_hessian(model, theta, h=1e-6):
    out = np.zeros((model.dim, model.dim))
    for i in range(model.dim):
        e = np.zeros(model.dim)
        e[i] = h
        out[:, i] = (eval_grad(model, theta + e) - eval_grad(model, theta - e)) / (2 * h)
    return out


def fd_third(model, theta, m, h=1e-5):
    out = np.zeros(model.dim)
    for i in range(model.dim):
        e = np.zeros(model.dim)
        e[i] = h
        out[i] = np.sum((eval_hessian(model, theta + e) - eval_hessian(model, theta - e)) * m) / (2 * h)
    return out


def empirical_covariance(model, theta, n=100_000, seed=3):
    draws = model.sample_noise(theta, np.random.default_rng(seed), n)
    return draws.mean(axis=0), np.cov(draws, rowvar=False)


def random_symmetric(dim, seed=0):
    a = np.random.default_rng(seed).standard_normal((dim, dim))
    return 0.5 * (a + a.T)


class TestQuadraticValley:
    def test_loss_and_manifold(self, valley):
        assert eval_loss(valley, np.array([0.0, 3.0])) == 0.0
        assert eval_loss(valley, np.array([2.0, 1.0])) == pytest.approx(4.0)

    def test_batched_evaluation(self, valley):
        thetas = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [2.0, 0.5]]])
        assert eval_loss(valley, thetas).shape == (2, 2)
        assert eval_grad(valley, thetas).shape == (2, 2, 2)
        assert_allclose(eval_grad(valley, thetas)[1, 1], valley.grad(np.array([2.0, 0.5])))

    @pytest.mark.parametrize("theta", [[0.3, -1.2], [1.0, 2.0], [0.0, 0.5]])
    def test_derivatives_match_finite_differences(self, valley, theta):
        theta = np.array(theta)
        assert_allclose(eval_grad(valley, theta), fd_grad(valley, theta), atol=1e-6)
        assert_allclose(eval_hessian(valley, theta), fd_hessian(valley, theta), atol=1e-6)
        m = random_symmetric(2)
        assert_allclose(third_contract(valley, theta, m), fd_third(valley, theta, m), atol=1e-6)

    def test_isotropic_noise_covariance(self, valley):
        mean, cov = empirical_covariance(valley, np.array([0.0, 1.0]))
        assert_allclose(mean, 0.0, atol=0.02)
        assert_allclose(cov, np.eye(2), atol=0.02)

    def test_hessian_aligned_noise_covariance(self, aligned_valley):
        theta = np.array([0.0, 1.5])
        expected = aligned_valley.noise_covariance(theta)
        assert_allclose(expected, eval_hessian(aligned_valley, theta), atol=1e-12)
        _, cov = empirical_covariance(aligned_valley, theta)
        assert_allclose(cov, expected, atol=0.05 * np.max(expected))

    def test_custom_noise(self):
        sigma0 = (2.0, 0.5, 0.5, 1.0)
        model = QuadraticValley(NoiseSpec("custom", 1.0, sigma0))
        assert_allclose(model.noise_covariance(np.zeros(2)), np.reshape(sigma0, (2, 2)))
        _, cov = empirical_covariance(model, np.zeros(2))
        assert_allclose(cov, np.reshape(sigma0, (2, 2)), atol=0.05)

    def test_noise_is_bounded(self, aligned_valley, rng):
        theta = np.array([0.5, 3.0])
        draws = aligned_valley.sample_noise(theta, rng, 10_000)
        assert np.max(np.linalg.norm(draws, axis=-1)) <= aligned_valley.sigma_max

    def test_custom_needs_covariance(self):
        with pytest.raises(ConfigError):
            NoiseSpec("custom")

    def test_unknown_noise_kind(self):
        with pytest.raises(ConfigError):
            NoiseSpec("pink")


class TestBlockQuadratic:
    def test_manifold_is_flat_block(self, block):
        assert eval_loss(block, np.array([0.0, 0.0, 5.0, -3.0])) == 0.0
        assert_allclose(eval_grad(block, np.ones(4)), [1.0, 2.0, 0.0, 0.0])
        assert_allclose(third_contract(block, np.ones(4), np.eye(4)), 0.0)

    def test_noise_covariance_constant(self, block):
        assert_allclose(block.noise_covariance(np.ones(4)), np.eye(4))
        _, cov = empirical_covariance(block, np.zeros(4))
        assert_allclose(cov, np.eye(4), atol=0.03)

    def test_rejects_bad_eigenvalues(self):
        with pytest.raises(ConfigError):
            BlockQuadratic([1.0, -1.0], 3)
        with pytest.raises(ConfigError):
            BlockQuadratic([1.0, 1.0, 1.0], 2)


class TestSoftmaxLabelNoise:
    def test_derivatives_match_finite_differences(self, softmax):
        theta = np.random.default_rng(1).standard_normal(softmax.dim) * 0.3
        assert_allclose(eval_grad(softmax, theta), fd_grad(softmax, theta), atol=1e-6)
        assert_allclose(eval_hessian(softmax, theta), fd_hessian(softmax, theta), atol=1e-6)
        m = random_symmetric(softmax.dim, seed=2)
        assert_allclose(third_contract(softmax, theta, m), fd_third(softmax, theta, m), atol=1e-5)

    def test_label_noise_covariance(self, softmax):
        theta = np.random.default_rng(4).standard_normal(softmax.dim) * 0.3
        expected = softmax.noise_covariance(theta)
        mean, cov = empirical_covariance(softmax, theta, n=200_000)
        scale = np.max(np.abs(expected))
        assert_allclose(mean, 0.0, atol=0.02 * np.sqrt(scale))
        assert_allclose(cov, expected, atol=0.03 * scale)

    def test_interpolating_point(self, softmax):
        theta = softmax.find_interpolating_point()
        assert np.linalg.norm(eval_grad(softmax, theta)) < 1e-8
        assert abs(eval_loss(softmax, theta) - softmax.loss_minimum) < 1e-6
        # At interpolation the label-noise covariance equals the Hessian
        assert_allclose(softmax.noise_covariance(theta), eval_hessian(softmax, theta), atol=1e-6)

    def test_too_many_parameters(self):
        with pytest.raises(ConfigError):
            build_model(ModelSpec(name="softmax", features=30, classes=3))

    def test_corruption_range(self):
        with pytest.raises(ConfigError):
            build_model(ModelSpec(name="softmax", corruption=0.0))


class TestOracleContract:
    def test_build_model(self):
        assert isinstance(build_model(ModelSpec()), QuadraticValley)
        block = build_model(ModelSpec(name="block", dim=3, eigenvalues=[2.0], noise_scale=0.5))
        assert_allclose(block.noise_covariance(np.zeros(3)), 0.5 * np.eye(3))
        with pytest.raises(ConfigError):
            build_model(ModelSpec(name="resnet"))

    def test_shape_checked(self, valley):
        with pytest.raises(DomainError):
            eval_loss(valley, np.zeros(3))

    def test_non_finite_rejected(self, valley):
        with pytest.raises(NonFiniteError):
            eval_grad(valley, np.array([np.nan, 0.0]))

    def test_contraction_must_be_symmetric(self, valley):
        with pytest.raises(DomainError):
            third_contract(valley, np.zeros(2), np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_batch_size_positive(self, valley, rng):
        with pytest.raises(DomainError):
            sample_stoch_grad(valley, np.zeros(2), 0, rng)

    def test_minibatch_variance_shrinks(self, valley):
        rng = np.random.default_rng(9)
        theta = np.array([0.0, 1.0])
        draws = np.array([sample_stoch_grad(valley, theta, 8, rng) for _ in range(20_000)])
        assert_allclose(np.var(draws, axis=0), 1.0 / 8, rtol=0.05)


class TestNoiseStreams:
    def test_same_address_same_draws(self):
        a = NoiseStreams(11).generator("sgd", 3, 1).standard_normal(5)
        b = NoiseStreams(11).generator("sgd", 3, 1).standard_normal(5)
        assert_allclose(a, b, rtol=0, atol=0)

    def test_addresses_are_independent(self):
        streams = NoiseStreams(11)
        a = streams.generator("sgd", 3, 1).standard_normal(5)
        b = streams.generator("sgd", 3, 2).standard_normal(5)
        c = streams.derive(1).generator("sgd", 3, 1).standard_normal(5)
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)

    def test_bounded_normal(self, rng):
        draws = bounded_normal(rng, 100_000, bound=1.0)
        assert np.max(np.abs(draws)) <= 1.0
