"""
Models module for the Slow SDE Laboratory.
Toy loss landscapes with closed-form derivatives and configurable gradient
noise; the gradient oracle every optimizer and SDE consumes.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import Config
from exceptions import ConfigError, DomainError, NonConvergentFlowError, NonFiniteError
from numerics import matrix_fn, sym_eig
from streams import NoiseStreams, bounded_normal

logger = logging.getLogger(__name__)

NOISE_KINDS = ("isotropic", "hessian_aligned", "custom")


@dataclass(frozen=True)
class NoiseSpec:
    """Gradient-noise structure: isotropic(σ²), hessian_aligned(c) or custom(Σ₀)."""

    kind: str = "isotropic"
    scale: float = 1.0
    covariance: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind: {self.kind}", key="model.noise")
        if self.scale < 0:
            raise ConfigError(f"noise scale must be ≥ 0, got {self.scale}", key="model.noise_scale")
        if self.kind == "custom" and self.covariance is None:
            raise ConfigError("custom noise needs model.noise_covariance", key="model.noise_covariance")


def _psd_sqrt(matrix):
    """Symmetric square root of a PSD matrix, clamping round-off negatives."""
    return matrix_fn(sym_eig(matrix), lambda lam: math.sqrt(max(lam, 0.0)))


class LossModel(ABC):
    """Oracle bundle: L, ∇L, ∇²L, ∇³L[·], Σ(θ) and a noise sampler."""

    name = "model"
    loss_minimum = 0.0
    dataset_size = None

    def __init__(self, dim):
        self.dim = dim

    @property
    @abstractmethod
    def sigma_max(self):
        """Declared bound on ‖z‖ for every noise draw."""

    @abstractmethod
    def loss(self, theta):
        """L(θ); θ may carry leading batch axes."""

    @abstractmethod
    def grad(self, theta):
        """∇L(θ); θ may carry leading batch axes."""

    @abstractmethod
    def hessian(self, theta):
        """∇²L(θ) at a single point."""

    @abstractmethod
    def third_contract(self, theta, m):
        """∇³L(θ)[M] at a single point."""

    @abstractmethod
    def noise_covariance(self, theta):
        """Σ(θ) at a single point."""

    @abstractmethod
    def sample_noise(self, theta, rng, count=1):
        """count i.i.d. noise draws per batch entry: shape θ.shape[:-1] + (count, d)."""

    def manifold_hint(self):
        """Sample points on the minimizer manifold, or None."""
        return None

    def default_start(self):
        """Initialization used when a run config gives no theta0."""
        return np.zeros(self.dim)


class QuadraticValley(LossModel):
    """L(x, y) = ½x²(1 + y²); Γ = {x = 0}."""

    name = "valley"
    # Bound on the Hessian's largest eigenvalue over |x| ≤ 1, |y| ≤ 10
    HESSIAN_BOUND = 105.0

    def __init__(self, noise=None):
        super().__init__(2)
        self.noise = noise or NoiseSpec()
        if self.noise.kind == "custom":
            self._sigma0 = np.asarray(self.noise.covariance, dtype=float).reshape(2, 2)
            self._sigma0_sqrt = _psd_sqrt(self._sigma0)

    @property
    def sigma_max(self):
        bound = Config.NOISE_TRUNCATION * math.sqrt(self.dim)
        if self.noise.kind == "isotropic":
            return bound * math.sqrt(self.noise.scale)
        if self.noise.kind == "hessian_aligned":
            return bound * math.sqrt(self.noise.scale * self.HESSIAN_BOUND)
        return bound * math.sqrt(max(float(np.max(np.linalg.eigvalsh(self._sigma0))), 0.0))

    def loss(self, theta):
        x, y = theta[..., 0], theta[..., 1]
        return 0.5 * x**2 * (1.0 + y**2)

    def grad(self, theta):
        x, y = theta[..., 0], theta[..., 1]
        return np.stack([x * (1.0 + y**2), x**2 * y], axis=-1)

    def _hessians(self, theta):
        x, y = theta[..., 0], theta[..., 1]
        out = np.empty(theta.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + y**2
        out[..., 0, 1] = out[..., 1, 0] = 2.0 * x * y
        out[..., 1, 1] = x**2
        return out

    def hessian(self, theta):
        return self._hessians(np.asarray(theta, dtype=float))

    def third_contract(self, theta, m):
        # Only L_xxy = 2y and L_xyy = 2x are nonzero
        x, y = theta
        return np.array([
            4.0 * y * m[0, 1] + 2.0 * x * m[1, 1],
            2.0 * y * m[0, 0] + 4.0 * x * m[0, 1],
        ])

    def noise_covariance(self, theta):
        if self.noise.kind == "isotropic":
            return self.noise.scale * np.eye(2)
        if self.noise.kind == "custom":
            return self._sigma0.copy()
        h = self.hessian(theta)
        values, vectors = np.linalg.eigh(h)
        return self.noise.scale * (vectors * np.maximum(values, 0.0)) @ vectors.T

    def sample_noise(self, theta, rng, count=1):
        theta = np.asarray(theta, dtype=float)
        g = bounded_normal(rng, theta.shape[:-1] + (count, 2))
        if self.noise.kind == "isotropic":
            return math.sqrt(self.noise.scale) * g
        if self.noise.kind == "custom":
            return g @ self._sigma0_sqrt.T
        values, vectors = np.linalg.eigh(self._hessians(theta))
        roots = np.sqrt(np.maximum(values, 0.0))
        sqrt_h = np.einsum("...ik,...k,...jk->...ij", vectors, roots, vectors)
        return math.sqrt(self.noise.scale) * np.einsum("...ij,...nj->...ni", sqrt_h, g)

    def manifold_hint(self):
        ys = np.linspace(-3.0, 3.0, 7)
        return np.stack([np.zeros_like(ys), ys], axis=-1)

    def default_start(self):
        return np.array([0.5, 1.0])


class BlockQuadratic(LossModel):
    """L(θ) = ½θᵀH₀θ with H₀ = diag(λ₁..λ_m, 0..0) and constant noise Σ₀."""

    name = "block"

    def __init__(self, eigenvalues, dim, covariance=None):
        super().__init__(dim)
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        if eigenvalues.size > dim or np.any(eigenvalues <= 0):
            raise ConfigError("block eigenvalues must be positive and at most dim in number",
                              key="model.eigenvalues")
        self.m = eigenvalues.size
        self.h_diag = np.concatenate([eigenvalues, np.zeros(dim - self.m)])
        self.sigma0 = np.eye(dim) if covariance is None else np.asarray(covariance, dtype=float).reshape(dim, dim)
        self._sigma0_sqrt = _psd_sqrt(self.sigma0)

    @property
    def sigma_max(self):
        top = max(float(np.max(np.linalg.eigvalsh(self.sigma0))), 0.0)
        return Config.NOISE_TRUNCATION * math.sqrt(self.dim * top)

    def loss(self, theta):
        return 0.5 * np.sum(self.h_diag * theta**2, axis=-1)

    def grad(self, theta):
        return self.h_diag * theta

    def hessian(self, theta):
        return np.diag(self.h_diag)

    def third_contract(self, theta, m):
        return np.zeros(self.dim)

    def noise_covariance(self, theta):
        return self.sigma0.copy()

    def sample_noise(self, theta, rng, count=1):
        theta = np.asarray(theta, dtype=float)
        g = bounded_normal(rng, theta.shape[:-1] + (count, self.dim))
        return g @ self._sigma0_sqrt.T

    def manifold_hint(self):
        points = np.zeros((3, self.dim))
        points[:, self.m:] = np.linspace(-1.0, 1.0, 3)[:, None]
        return points

    def default_start(self):
        return np.ones(self.dim)


def _softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


class SoftmaxLabelNoise(LossModel):
    """
    Linear C-class softmax classifier trained with per-access label noise.

    θ = W.ravel() with W of shape (C, n). Each access corrupts the label with
    probability p, replacing it by one of the other C−1 classes uniformly.
    """

    name = "softmax"
    MAX_PARAMS = 64

    def __init__(self, inputs, labels, classes, corruption):
        inputs = np.asarray(inputs, dtype=float)
        labels = np.asarray(labels, dtype=int)
        n_points, n_features = inputs.shape
        super().__init__(classes * n_features)
        if self.dim > self.MAX_PARAMS:
            raise ConfigError(f"softmax model has {self.dim} parameters, limit {self.MAX_PARAMS}",
                              key="model.features")
        if not 0.0 < corruption < 1.0:
            raise ConfigError(f"corruption probability must be in (0, 1), got {corruption}",
                              key="model.corruption")
        self.inputs = inputs
        self.labels = labels
        self.classes = classes
        self.features = n_features
        self.corruption = corruption
        self.dataset_size = n_points

        onehot = np.eye(classes)[labels]
        self.targets = (1.0 - corruption) * onehot + corruption / (classes - 1) * (1.0 - onehot)
        self.loss_minimum = float(-np.mean(np.sum(self.targets * np.log(self.targets), axis=1)))
        self._interpolating = None

    @classmethod
    def synthetic(cls, n_points=4, n_features=4, classes=3, corruption=0.2, seed=0):
        """Random Gaussian inputs with labels cycling through the classes."""
        rng = NoiseStreams(seed).generator("data")
        inputs = rng.standard_normal((n_points, n_features))
        labels = np.arange(n_points) % classes
        return cls(inputs, labels, classes, corruption)

    @property
    def sigma_max(self):
        return 2.0 * math.sqrt(2.0) * float(np.max(np.linalg.norm(self.inputs, axis=1)))

    def _probabilities(self, theta):
        w = theta.reshape(theta.shape[:-1] + (self.classes, self.features))
        return _softmax(np.einsum("...cn,in->...ic", w, self.inputs))

    def loss(self, theta):
        s = self._probabilities(theta)
        return -np.mean(np.sum(self.targets * np.log(s), axis=-1), axis=-1)

    def grad(self, theta):
        s = self._probabilities(theta)
        g = np.einsum("...ic,in->...cn", s - self.targets, self.inputs) / self.dataset_size
        return g.reshape(theta.shape)

    def hessian(self, theta):
        s = self._probabilities(np.asarray(theta, dtype=float))
        out = np.zeros((self.dim, self.dim))
        for s_i, x_i in zip(s, self.inputs):
            jac = np.diag(s_i) - np.outer(s_i, s_i)
            out += np.kron(jac, np.outer(x_i, x_i))
        return out / self.dataset_size

    def third_contract(self, theta, m):
        s = self._probabilities(np.asarray(theta, dtype=float))
        blocks = m.reshape(self.classes, self.features, self.classes, self.features)
        out = np.zeros((self.classes, self.features))
        for s_i, x_i in zip(s, self.inputs):
            jac = np.diag(s_i) - np.outer(s_i, s_i)
            q = np.einsum("bjck,j,k->bc", blocks, x_i, x_i)
            # ∂J_ab/∂z_c = δ_ab J_ac − J_ac s_b − s_a J_bc, contracted with q over (b, c)
            logit_part = np.sum(jac * q, axis=1) - jac @ (q.T @ s_i) - s_i * np.sum(jac * q)
            out += np.outer(logit_part, x_i)
        return out.ravel() / self.dataset_size

    def noise_covariance(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._probabilities(theta)
        second = np.zeros((self.dim, self.dim))
        for s_i, p_i, x_i in zip(s, self.targets, self.inputs):
            r = s_i - p_i
            block = np.outer(r, r) + np.diag(p_i) - np.outer(p_i, p_i)
            second += np.kron(block, np.outer(x_i, x_i))
        g = self.grad(theta)
        return second / self.dataset_size - np.outer(g, g)

    def _noisy_labels(self, rng, indices):
        labels = self.labels[indices]
        corrupt = rng.random(indices.shape) < self.corruption
        offsets = rng.integers(1, self.classes, size=indices.shape)
        return np.where(corrupt, (labels + offsets) % self.classes, labels)

    def example_grads(self, theta, indices, rng):
        """Per-example gradients at given dataset indices with fresh noisy labels."""
        theta = np.asarray(theta, dtype=float)
        indices = np.asarray(indices, dtype=int)
        s = self._probabilities(theta)
        s_sel = np.take_along_axis(s, indices[..., None], axis=-2)
        onehot = np.eye(self.classes)[self._noisy_labels(rng, indices)]
        grads = np.einsum("...kc,...kn->...kcn", s_sel - onehot, self.inputs[indices])
        return grads.reshape(indices.shape + (self.dim,))

    def sample_noise(self, theta, rng, count=1):
        theta = np.asarray(theta, dtype=float)
        indices = rng.integers(self.dataset_size, size=theta.shape[:-1] + (count,))
        return self.example_grads(theta, indices, rng) - self.grad(theta)[..., None, :]

    def find_interpolating_point(self, tol=None, max_iter=10**6):
        """Gradient descent from zero to ‖∇L‖ < tol (a tenth of GRAD_TOL by default); the result is cached."""
        tol = Config.GRAD_TOL / 10 if tol is None else tol
        if self._interpolating is not None:
            return self._interpolating.copy()
        lr = 2.0 / float(np.max(np.sum(self.inputs**2, axis=1)))
        theta = np.zeros(self.dim)
        for step in range(max_iter):
            g = self.grad(theta)
            if np.linalg.norm(g) < tol:
                logger.info(f"Interpolating point found after {step} gradient steps")
                self._interpolating = theta
                return theta.copy()
            theta = theta - lr * g
        raise NonConvergentFlowError(f"gradient descent did not reach ‖∇L‖ < {tol} in {max_iter} steps")

    def manifold_hint(self):
        return self.find_interpolating_point()[None, :]


@dataclass
class ModelSpec:
    """Model selection as it appears in the [model] config section."""

    name: str = "valley"
    noise: str = "isotropic"
    noise_scale: float = 1.0
    noise_covariance: Optional[List[float]] = None
    dim: int = 4
    eigenvalues: List[float] = field(default_factory=lambda: [1.0, 2.0])
    features: int = 4
    points: int = 4
    classes: int = 3
    corruption: float = 0.2
    data_seed: int = 0
    theta0: Optional[List[float]] = None


def build_model(spec: ModelSpec):
    """Construct the LossModel named by a ModelSpec."""
    if spec.name == "valley":
        covariance = tuple(spec.noise_covariance) if spec.noise_covariance else None
        return QuadraticValley(NoiseSpec(spec.noise, spec.noise_scale, covariance))
    if spec.name == "block":
        covariance = None
        if spec.noise_covariance:
            covariance = np.asarray(spec.noise_covariance, dtype=float).reshape(spec.dim, spec.dim)
        elif spec.noise == "isotropic":
            covariance = spec.noise_scale * np.eye(spec.dim)
        return BlockQuadratic(spec.eigenvalues, spec.dim, covariance)
    if spec.name == "softmax":
        return SoftmaxLabelNoise.synthetic(spec.points, spec.features, spec.classes,
                                           spec.corruption, spec.data_seed)
    raise ConfigError(f"unknown model: {spec.name}", key="model.name")


def _validated(model, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1:] != (model.dim,):
        raise DomainError(f"{model.name} expects θ with last axis {model.dim}, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise NonFiniteError("θ contains non-finite entries")
    return theta


def eval_loss(model, theta):
    return model.loss(_validated(model, theta))


def eval_grad(model, theta):
    return model.grad(_validated(model, theta))


def eval_hessian(model, theta):
    h = model.hessian(_validated(model, theta))
    return 0.5 * (h + h.T)


def third_contract(model, theta, m):
    """∇³L(θ)[M]; component i is Σ_jk ∂³L/∂θᵢ∂θⱼ∂θₖ·M_jk."""
    m = np.asarray(m, dtype=float)
    if m.shape != (model.dim, model.dim):
        raise DomainError(f"contraction matrix must be {model.dim}×{model.dim}, got {m.shape}")
    if np.max(np.abs(m - m.T)) > Config.SYMMETRY_TOL * max(1.0, float(np.max(np.abs(m)))):
        raise DomainError("contraction matrix is not symmetric")
    return model.third_contract(_validated(model, theta), 0.5 * (m + m.T))


def sample_stoch_grad(model, theta, batch_size, rng):
    """∇L(θ) plus the mean of batch_size i.i.d. noise draws."""
    if batch_size < 1:
        raise DomainError(f"batch size must be ≥ 1, got {batch_size}")
    theta = _validated(model, theta)
    noise = model.sample_noise(theta, rng, batch_size)
    return model.grad(theta) + np.mean(noise, axis=-2)
