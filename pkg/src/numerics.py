"""
Numerics module for the Slow SDE Laboratory.
Handles special functions, the symmetric eigendecomposition contract,
matrix functions and adaptive ODE integration.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.integrate import RK45, quad

from config import Config
from exceptions import (
    DomainError,
    EigenSolverError,
    NonConvergentFlowError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

# 7-term Taylor series of ψ around 0: Σ (−1)^{n+1} xⁿ/(n+1)!
_PSI_SERIES = tuple((-1.0) ** (n + 1) / math.factorial(n + 1) for n in range(1, 8))


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank_threshold: float

    @property
    def dim(self):
        return self.eigenvalues.shape[0]

    @property
    def nonzero(self):
        """Mask of eigenvalues above the rank threshold in magnitude."""
        return np.abs(self.eigenvalues) > self.rank_threshold

    @property
    def rank(self):
        return int(np.count_nonzero(self.nonzero))

    @property
    def thresholded(self):
        """Eigenvalues with the sub-threshold ones set to exactly zero."""
        return np.where(self.nonzero, self.eigenvalues, 0.0)

    def reconstruct(self):
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def sym_eig(matrix, rank_threshold=None):
    """
    Eigendecompose a symmetric matrix.

    rank_threshold is relative: eigenvalues with |λ| ≤ rank_threshold·max(1, |λ_max|)
    are treated as zero. The stored SymEig.rank_threshold is the absolute cutoff.
    Eigenvector signs are fixed so the largest-magnitude entry of each column is positive.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {m.shape}")
    _check_finite(m, "matrix")

    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asymmetry = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asymmetry > Config.SYMMETRY_TOL * scale:
        raise DomainError(f"matrix is not symmetric (max |M − Mᵀ| = {asymmetry:.3e})")
    m = 0.5 * (m + m.T)

    try:
        values, vectors = scipy.linalg.eigh(m)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EigenSolverError(f"symmetric eigensolver failed on {m.shape[0]}×{m.shape[0]} input: {e}") from e

    order = np.argsort(values, kind="stable")[::-1]
    values = values[order]
    vectors = vectors[:, order]

    # Deterministic sign convention
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    vectors = vectors * signs

    relative = Config.RANK_THRESHOLD if rank_threshold is None else rank_threshold
    lam_max = float(np.max(np.abs(values))) if values.size else 0.0
    threshold = relative * max(1.0, lam_max)
    return SymEig(eigenvalues=values, eigenvectors=vectors, rank_threshold=threshold)


def psi(x):
    """
    ψ(x) = (e^{−x} − 1 + x)/x with ψ(0) = 0.

    Accepts scalars or arrays; uses the Taylor series below Config.PSI_SERIES_CUTOFF.
    """
    arr = np.asarray(x, dtype=float)
    _check_finite(arr, "ψ argument")
    if np.any(arr < 0):
        raise DomainError(f"ψ is only defined for x ≥ 0, got min {float(np.min(arr)):.6g}")

    small = arr < Config.PSI_SERIES_CUTOFF
    safe = np.where(small, 1.0, arr)
    exact = (np.expm1(-safe) + safe) / safe

    series = np.zeros_like(arr)
    power = np.ones_like(arr)
    for coeff in _PSI_SERIES:
        power = power * arr
        series = series + coeff * power

    out = np.where(small, series, exact)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=4096)
def _big_f_scalar(x):
    value, error = quad(psi, 0.0, x, epsabs=Config.QUAD_ABS_TOL, epsrel=1e-12, limit=200)
    if error > 10 * Config.QUAD_ABS_TOL * max(1.0, x):
        logger.warning(f"Quadrature error estimate {error:.2e} for F({x})")
    return value


def big_f(x):
    """F(x) = ∫₀ˣ ψ(y) dy by adaptive Gauss-Kronrod quadrature."""
    arr = np.asarray(x, dtype=float)
    _check_finite(arr, "F argument")
    if np.any(arr < 0):
        raise DomainError(f"F is only defined for x ≥ 0, got min {float(np.min(arr)):.6g}")
    if arr.ndim == 0:
        return 0.0 if arr == 0 else _big_f_scalar(float(arr))
    return np.array([0.0 if v == 0 else _big_f_scalar(float(v)) for v in arr.ravel()]).reshape(arr.shape)


def matrix_fn(eig: SymEig, f: Callable[[float], float]):
    """V·diag(f(λᵢ))·Vᵀ over the rank-thresholded eigenvalues."""
    values = []
    for lam in eig.thresholded:
        try:
            value = float(f(float(lam)))
        except (DomainError, ValueError, ZeroDivisionError, OverflowError) as e:
            raise DomainError(f"matrix function undefined at eigenvalue {lam:.6g}: {e}") from e
        if not math.isfinite(value):
            raise DomainError(f"matrix function undefined at eigenvalue {lam:.6g}")
        values.append(value)
    v = eig.eigenvectors
    out = (v * np.asarray(values)) @ v.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class StopRule:
    """Fixed horizon, or stop once norm(field) falls below field_tol."""

    horizon: Optional[float] = None
    field_tol: Optional[float] = None
    norm: Optional[Callable[[np.ndarray], float]] = None

    @classmethod
    def fixed(cls, horizon):
        return cls(horizon=horizon)

    @classmethod
    def stationary(cls, field_tol, norm=None):
        return cls(field_tol=field_tol, norm=norm)

    def field_norm(self, value):
        return float(self.norm(value)) if self.norm else float(np.linalg.norm(value))


def integrate_ode(field, x0, stop: StopRule, tol, first_step=None, max_steps=None):
    """
    Integrate dx/dt = field(x) with the Dormand-Prince 5(4) pair.

    x0 may have any shape; field receives and returns arrays of that shape.
    Raises NonConvergentFlowError when the step budget or the flow horizon runs out.
    """
    x0 = np.asarray(x0, dtype=float)
    _check_finite(x0, "initial state")
    shape = x0.shape
    first_step = Config.ODE_FIRST_STEP if first_step is None else first_step
    max_steps = Config.ODE_MAX_STEPS if max_steps is None else max_steps

    if stop.horizon is None and stop.field_tol is None:
        raise DomainError("stop rule needs a horizon or a field tolerance")

    if stop.field_tol is not None:
        value = np.asarray(field(x0), dtype=float)
        _check_finite(value, "vector field")
        if stop.field_norm(value) < stop.field_tol:
            return x0.copy()
        t_bound = Config.FLOW_HORIZON if stop.horizon is None else stop.horizon
    else:
        t_bound = stop.horizon
        if t_bound == 0:
            return x0.copy()

    def rhs(t, y):
        return np.asarray(field(y.reshape(shape)), dtype=float).ravel()

    solver = RK45(rhs, 0.0, x0.ravel(), t_bound, rtol=tol, atol=tol,
                  first_step=min(first_step, t_bound))
    steps = 0
    while solver.status == "running":
        if steps >= max_steps:
            raise NonConvergentFlowError(f"exceeded {max_steps} integrator steps at t={solver.t:.6g}")
        message = solver.step()
        steps += 1
        if solver.status == "failed":
            raise NonConvergentFlowError(f"integrator failed at t={solver.t:.6g}: {message}")
        y = solver.y
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite state at t={solver.t:.6g}")
        if stop.field_tol is not None:
            if stop.field_norm(rhs(solver.t, y)) < stop.field_tol:
                logger.debug(f"Flow stationary after {steps} steps at t={solver.t:.4g}")
                return y.reshape(shape).copy()

    if stop.field_tol is not None:
        raise NonConvergentFlowError(f"flow not stationary by t={t_bound:.6g} after {steps} steps")
    return solver.y.reshape(shape).copy()
