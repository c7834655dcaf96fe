"""
Manifold module for the Slow SDE Laboratory.
Handles the geometry of the minimizer manifold: gradient-flow projection Φ,
the tangent projector ∂Φ, the second differential ∂²Φ[·], the V_H operator,
the noise split Σ∥/Σ⋄ and the ψ-rescaled covariances.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from config import Config
from exceptions import (
    DomainError,
    NonConvergentFlowError,
    NonFiniteError,
    OffManifoldError,
    RankAmbiguityError,
)
from models import eval_grad, eval_hessian, third_contract
from numerics import StopRule, SymEig, big_f, integrate_ode, matrix_fn, psi, sym_eig

logger = logging.getLogger(__name__)


class NullMarker:
    """The distinguished point θ_null returned when a flow does not reach Γ."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "θ_null"

    def __bool__(self):
        return False


NULL_MARKER = NullMarker()


def _max_row_norm(values):
    return float(np.max(np.linalg.norm(values, axis=-1)))


def _flow(model, thetas, tol):
    stop = StopRule.stationary(Config.PROJECTION_GRAD_TOL, norm=_max_row_norm)
    return integrate_ode(lambda x: -model.grad(x), thetas, stop, tol)


def gf_project_batch(model, thetas, tol=None, loss_tol=None):
    """
    Gradient-flow projection of each row of thetas.

    Returns (points, valid); invalid rows did not converge, left the declared
    manifold, or started non-finite, and hold NaN.
    """
    tol = Config.PROJECTION_TOL if tol is None else tol
    loss_tol = Config.LOSS_MATCH_TOL if loss_tol is None else loss_tol
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    points = np.full_like(thetas, np.nan)
    valid = np.all(np.isfinite(thetas), axis=-1)
    if not np.any(valid):
        return points, valid

    try:
        points[valid] = _flow(model, thetas[valid], tol)
    except (NonConvergentFlowError, NonFiniteError) as e:
        logger.warning(f"Batched projection failed ({e}); projecting rows one by one")
        for i in np.flatnonzero(valid):
            try:
                points[i] = _flow(model, thetas[i:i + 1], tol)[0]
            except (NonConvergentFlowError, NonFiniteError):
                valid[i] = False

    with np.errstate(invalid="ignore"):
        valid &= np.abs(model.loss(points) - model.loss_minimum) <= loss_tol
    points[~valid] = np.nan
    return points, valid


def gf_project(model, theta, tol=None):
    """Φ(θ), or NULL_MARKER when the flow does not settle on Γ."""
    points, valid = gf_project_batch(model, np.asarray(theta, dtype=float)[None, :], tol)
    return points[0] if valid[0] else NULL_MARKER


@dataclass(frozen=True)
class ManifoldFrame:
    """A point ζ ∈ Γ with cached Hessian eigenbasis, projectors and noise split."""

    zeta: np.ndarray
    eig: SymEig
    rank: int
    hessian: np.ndarray
    hess_pinv: np.ndarray
    p_par: np.ndarray
    p_perp: np.ndarray
    tangent_basis: np.ndarray
    sigma: np.ndarray
    sigma_par: np.ndarray
    sigma_diamond: np.ndarray
    sigma_par_sqrt: np.ndarray
    eta_h: float
    hat_sigma_diamond: np.ndarray
    hat_psi: np.ndarray
    psi_mat: np.ndarray

    @property
    def dim(self):
        return self.zeta.shape[0]


def _pair_sums(eig):
    lam = eig.thresholded
    sums = lam[:, None] + lam[None, :]
    active = eig.nonzero[:, None] | eig.nonzero[None, :]
    if np.any(sums[active] <= 0):
        raise DomainError("Hessian has a non-positive eigenvalue pair sum; ζ is not a minimizer")
    return sums, active


def _eigen_weighted(eig, m, weights):
    """V·(W ∘ VᵀMV)·Vᵀ."""
    v = eig.eigenvectors
    out = v @ (weights * (v.T @ m @ v)) @ v.T
    return 0.5 * (out + out.T)


def _v_h(eig, m):
    sums, active = _pair_sums(eig)
    weights = np.where(active, 1.0 / np.where(active, sums, 1.0), 0.0)
    return _eigen_weighted(eig, m, weights)


def _hat_psi(eig, m, eta_h):
    sums, active = _pair_sums(eig)
    safe = np.where(active, sums, 1.0)
    weights = np.where(active, psi(eta_h * safe) / safe, 0.0)
    return _eigen_weighted(eig, m, weights)


def _psi_matrix(eig, m, eta_h):
    sums = eig.thresholded[:, None] + eig.thresholded[None, :]
    return _eigen_weighted(eig, m, psi(eta_h * np.maximum(sums, 0.0)))


def _check_rank_band(eig):
    threshold = eig.rank_threshold
    magnitudes = np.abs(eig.eigenvalues)
    ambiguous = (magnitudes > threshold / Config.RANK_BAND) & (magnitudes <= threshold * Config.RANK_BAND)
    if np.any(ambiguous):
        raise RankAmbiguityError(float(eig.eigenvalues[np.argmax(ambiguous)]), threshold)


def make_frame(model, zeta, eta_h=0.0):
    """Assemble every manifold quantity at ζ; rejects off-manifold points."""
    zeta = np.asarray(zeta, dtype=float)
    grad_norm = float(np.linalg.norm(eval_grad(model, zeta)))
    if grad_norm > Config.GRAD_TOL:
        raise OffManifoldError(grad_norm, Config.GRAD_TOL)
    if eta_h < 0:
        raise DomainError(f"ηH must be ≥ 0, got {eta_h}")

    hess = eval_hessian(model, zeta)
    eig = sym_eig(hess)
    _check_rank_band(eig)

    v = eig.eigenvectors
    basis = v[:, ~eig.nonzero]
    p_par = basis @ basis.T
    p_perp = np.eye(model.dim) - p_par
    inv = np.where(eig.nonzero, 1.0 / np.where(eig.nonzero, eig.eigenvalues, 1.0), 0.0)
    hess_pinv = (v * inv) @ v.T

    sigma = np.asarray(model.noise_covariance(zeta), dtype=float)
    sigma = 0.5 * (sigma + sigma.T)
    sigma_par = p_par @ sigma @ p_par
    sigma_par = 0.5 * (sigma_par + sigma_par.T)
    sigma_diamond = sigma - sigma_par

    if basis.shape[1]:
        tangent_block = sym_eig(basis.T @ sigma @ basis)
        root = matrix_fn(tangent_block, lambda lam: math.sqrt(max(lam, 0.0)))
        sigma_par_sqrt = basis @ root @ basis.T
    else:
        sigma_par_sqrt = np.zeros_like(sigma)

    return ManifoldFrame(
        zeta=zeta.copy(),
        eig=eig,
        rank=eig.rank,
        hessian=hess,
        hess_pinv=hess_pinv,
        p_par=p_par,
        p_perp=p_perp,
        tangent_basis=basis,
        sigma=sigma,
        sigma_par=sigma_par,
        sigma_diamond=sigma_diamond,
        sigma_par_sqrt=sigma_par_sqrt,
        eta_h=float(eta_h),
        hat_sigma_diamond=_v_h(eig, sigma_diamond),
        hat_psi=_hat_psi(eig, sigma_diamond, eta_h),
        psi_mat=_psi_matrix(eig, sigma, eta_h),
    )


def v_h(frame, m):
    """V_H(M): eigenbasis entries divided by λᵢ+λⱼ, doubly-null block dropped."""
    return _v_h(frame.eig, np.asarray(m, dtype=float))


def hat_sigma_diamond(frame):
    return frame.hat_sigma_diamond


def hat_psi(frame, eta_h=None):
    """Σ⋄ weighted by ψ(ηH(λᵢ+λⱼ))/(λᵢ+λⱼ) in the eigenbasis."""
    if eta_h is None or eta_h == frame.eta_h:
        return frame.hat_psi
    return _hat_psi(frame.eig, frame.sigma_diamond, eta_h)


def psi_matrix(frame, eta_h=None):
    """Σ weighted by ψ(ηH(λᵢ+λⱼ)) in the eigenbasis."""
    if eta_h is None or eta_h == frame.eta_h:
        return frame.psi_mat
    return _psi_matrix(frame.eig, frame.sigma, eta_h)


def psi_matrix_kron(frame, eta_h=None):
    """Ψ via vec(Ψ) = ψ(ηH·(H⊕H))·vec(Σ), without the pairwise eigen weights."""
    eta_h = frame.eta_h if eta_h is None else eta_h
    d = frame.dim
    identity = np.eye(d)
    kron_sum = np.kron(frame.hessian, identity) + np.kron(identity, frame.hessian)
    operator = matrix_fn(sym_eig(kron_sum), lambda lam: psi(eta_h * max(lam, 0.0)))
    out = (operator @ frame.sigma.ravel()).reshape(d, d)
    return 0.5 * (out + out.T)


def second_diff_phi(model, frame, m):
    """
    ∂²Φ(ζ)[M] = −∂Φ·∇³L[V_H(M)] − ∇²L⁺·∇³L[∂Φ·M·∂Φ].

    The first term carries the normal-normal and mixed blocks; the second is
    the normal displacement produced by the tangent-tangent block.
    """
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    tangential = -frame.p_par @ third_contract(model, frame.zeta, v_h(frame, m))
    tt_block = frame.p_par @ m @ frame.p_par
    normal = -frame.hess_pinv @ third_contract(model, frame.zeta, 0.5 * (tt_block + tt_block.T))
    return tangential + normal


@dataclass(frozen=True)
class SharpnessValues:
    tr_hess: float
    tr_f_term: float


def sharpness_values(model, frame, eta_h=None):
    """tr ∇²L(ζ) and tr F(2ηH∇²L(ζ))/(2ηH)."""
    eta_h = frame.eta_h if eta_h is None else eta_h
    lam = frame.eig.thresholded[frame.eig.nonzero]
    tr_hess = float(np.sum(frame.eig.thresholded))
    if eta_h == 0:
        return SharpnessValues(tr_hess, 0.0)
    a = 2.0 * eta_h
    tr_f = float(sum(big_f(a * l) for l in lam) / a)
    return SharpnessValues(tr_hess, tr_f)
