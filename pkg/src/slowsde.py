"""
Slow SDE module for the Slow SDE Laboratory.
Euler-Maruyama integration of the Slow SDE family on the minimizer manifold,
using the projected step followed by a gradient-flow retraction.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from config import Config
from exceptions import DomainError, LeftBasinError
from manifold import NULL_MARKER, gf_project, gf_project_batch, hat_psi, make_frame, second_diff_phi
from models import third_contract
from numerics import matrix_fn, psi
from optim import TrajectoryRecord
from streams import NoiseStreams

logger = logging.getLogger(__name__)


def _positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class Sgd:
    B: float

    def __post_init__(self):
        _positive(B=self.B)


@dataclass(frozen=True)
class Local:
    B: float
    K: int
    eta_h: float

    def __post_init__(self):
        _positive(B=self.B, K=self.K)
        if self.eta_h < 0:
            raise DomainError(f"ηH must be ≥ 0, got {self.eta_h}")


@dataclass(frozen=True)
class Kappa:
    kappa1: float
    kappa2: float

    def __post_init__(self):
        _positive(kappa1=self.kappa1, kappa2=self.kappa2)


@dataclass(frozen=True)
class LocalLsr:
    B: float
    K: int
    kappa: float
    eta_h: float

    def __post_init__(self):
        _positive(B=self.B, K=self.K, kappa=self.kappa)
        if self.eta_h < 0:
            raise DomainError(f"ηH must be ≥ 0, got {self.eta_h}")


@dataclass(frozen=True)
class LocalInf:
    B: float
    K: int

    def __post_init__(self):
        _positive(B=self.B, K=self.K)


@dataclass(frozen=True)
class LabelNoiseSgd:
    B: float

    def __post_init__(self):
        _positive(B=self.B)


@dataclass(frozen=True)
class LabelNoiseLocal:
    B: float
    K: int
    eta_h: float

    def __post_init__(self):
        _positive(B=self.B, K=self.K)
        if self.eta_h < 0:
            raise DomainError(f"ηH must be ≥ 0, got {self.eta_h}")


@dataclass(frozen=True)
class LabelNoiseLocalInf:
    B: float
    K: int

    def __post_init__(self):
        _positive(B=self.B, K=self.K)


SdeKind = Union[Sgd, Local, Kappa, LocalLsr, LocalInf, LabelNoiseSgd, LabelNoiseLocal, LabelNoiseLocalInf]

KIND_NAMES = {
    "sgd": Sgd,
    "local": Local,
    "kappa": Kappa,
    "local_lsr": LocalLsr,
    "local_inf": LocalInf,
    "label_noise_sgd": LabelNoiseSgd,
    "label_noise_local": LabelNoiseLocal,
    "label_noise_local_inf": LabelNoiseLocalInf,
}


@dataclass(frozen=True)
class Coefficients:
    """A = √diffusion·Σ∥^{1/2}; b = −drift_one·∇³L[Σ̂⋄] − drift_two·∇³L[Ψ̂(ηH)]."""

    diffusion: float
    drift_one: float
    drift_two: float
    eta_h: float = 0.0


@dataclass(frozen=True)
class LabelCoefficients:
    """b = −trace·∇³L[I] − f_term·∇³L[ψ(2ηH∇²L)]; no diffusion."""

    trace: float
    f_term: float
    eta_h: float = 0.0


def coefficients(kind: SdeKind):
    """Scalar coefficients of each Slow SDE variant."""
    match kind:
        case Sgd(B=b):
            return Coefficients(1.0 / b, 1.0 / (2 * b), 0.0)
        case Local(B=b, K=k, eta_h=eta_h):
            return Coefficients(1.0 / b, 1.0 / (2 * b), (k - 1) / (2 * b), eta_h)
        case Kappa(kappa1=k1, kappa2=k2):
            return Coefficients(k1, k2, 0.0)
        case LocalLsr(B=b, K=k, kappa=kappa, eta_h=eta_h):
            return Coefficients(1.0 / b, 1.0 / (2 * b), (kappa * k - 1) / (2 * b), eta_h)
        case LocalInf(B=b, K=k):
            return Coefficients(1.0 / b, k / (2 * b), 0.0)
        case LabelNoiseSgd(B=b):
            return LabelCoefficients(1.0 / (4 * b), 0.0)
        case LabelNoiseLocal(B=b, K=k, eta_h=eta_h):
            return LabelCoefficients(1.0 / (4 * b), (k - 1) / (4 * b), eta_h)
        case LabelNoiseLocalInf(B=b, K=k):
            return LabelCoefficients(k / (4 * b), 0.0)
    raise DomainError(f"unknown Slow SDE kind: {kind!r}")


def kind_eta_h(kind):
    return getattr(kind, "eta_h", 0.0)


@dataclass(frozen=True)
class DriftDiffusion:
    b: np.ndarray
    A: np.ndarray


def drift_and_diffusion(model, frame, kind: SdeKind):
    """Pre-projection drift b and diffusion factor A at the frame's point."""
    coeff = coefficients(kind)
    zeta = frame.zeta
    if isinstance(coeff, LabelCoefficients):
        b = -coeff.trace * third_contract(model, zeta, np.eye(frame.dim))
        if coeff.f_term:
            a = 2.0 * coeff.eta_h
            rescaled = matrix_fn(frame.eig, lambda lam: psi(a * max(lam, 0.0)))
            b = b - coeff.f_term * third_contract(model, zeta, rescaled)
        return DriftDiffusion(b, np.zeros((frame.dim, frame.dim)))

    b = -coeff.drift_one * third_contract(model, zeta, frame.hat_sigma_diamond)
    if coeff.drift_two:
        b = b - coeff.drift_two * third_contract(model, zeta, hat_psi(frame, coeff.eta_h))
    return DriftDiffusion(b, math.sqrt(coeff.diffusion) * frame.sigma_par_sqrt)


def rescale_time(pair: DriftDiffusion, factor):
    """(b, A) of the process observed on a clock running `factor` times faster."""
    return DriftDiffusion(pair.b * factor, pair.A * math.sqrt(factor))


@dataclass
class SdeState:
    """A point on Γ, its time, its step counter and its noise streams."""

    zeta: np.ndarray
    t: float = 0.0
    step: int = 0
    streams: Optional[NoiseStreams] = None


def projected_increment(model, frame, kind, dt, dw):
    """∂Φ·A·ΔW + (∂Φ·b + ½∂²Φ[AAᵀ])·dt."""
    pair = drift_and_diffusion(model, frame, kind)
    increment = frame.p_par @ pair.b * dt
    if np.any(pair.A):
        increment = increment + frame.p_par @ (pair.A @ dw)
        increment = increment + 0.5 * second_diff_phi(model, frame, pair.A @ pair.A.T) * dt
    return increment


def step_projected(model, state: SdeState, kind: SdeKind, dt):
    """One Euler-Maruyama step followed by retraction onto Γ."""
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    frame = make_frame(model, state.zeta, kind_eta_h(kind))
    streams = state.streams or NoiseStreams(Config.MASTER_SEED)
    dw = brownian_increments(streams, state.step, dt, (1, model.dim))[0]
    proposal = state.zeta + projected_increment(model, frame, kind, dt, dw)
    zeta = gf_project(model, proposal, Config.RETRACTION_TOL)
    if zeta is NULL_MARKER:
        raise LeftBasinError(
            f"retraction failed at t={state.t:.6g} (step {state.step}) from ζ={state.zeta} "
            f"with proposal {proposal}"
        )
    return SdeState(zeta=zeta, t=state.t + dt, step=state.step + 1, streams=streams)


def default_dt(horizon):
    return min(Config.SDE_MAX_DT, horizon / Config.SDE_STEPS_PER_HORIZON)


@dataclass
class SdeEnsemble:
    """Recorded states of R independent Slow SDE paths."""

    steps: np.ndarray
    times: np.ndarray
    zetas: np.ndarray
    tr_hess: np.ndarray
    failed: np.ndarray

    @property
    def replicas(self):
        return self.zetas.shape[1]


def brownian_increments(streams, step, dt, shape):
    """ΔW of step n: the ("sde", n) stream scaled by √dt, row r for path r."""
    return math.sqrt(dt) * streams.generator("sde", step).standard_normal(shape)


def integrate_ensemble(model, kind, zeta0, horizon, dt=None, streams=None, replicas=1, record_every=1,
                       increments=None):
    """
    Integrate R paths to the horizon; paths whose retraction fails are frozen
    and flagged.

    increments(step, dt, shape) supplies ΔW and defaults to brownian_increments.
    """
    if horizon <= 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    dt = default_dt(horizon) if dt is None else dt
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    streams = streams or NoiseStreams(Config.MASTER_SEED)
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    dt = horizon / n_steps
    eta_h = kind_eta_h(kind)
    if increments is None:
        def increments(step, step_dt, shape):
            return brownian_increments(streams, step, step_dt, shape)

    zetas = np.broadcast_to(np.asarray(zeta0, dtype=float), (replicas, model.dim)).copy()
    alive = np.ones(replicas, dtype=bool)

    def sharpness(points):
        return np.array([float(np.trace(model.hessian(p))) for p in points])

    steps, times, records, tr_hess = [0], [0.0], [zetas.copy()], [sharpness(zetas)]
    for n in range(n_steps):
        dw = increments(n, dt, (replicas, model.dim))
        proposals = zetas.copy()
        for r in np.flatnonzero(alive):
            frame = make_frame(model, zetas[r], eta_h)
            proposals[r] = zetas[r] + projected_increment(model, frame, kind, dt, dw[r])
        retracted, valid = gf_project_batch(model, proposals[alive], Config.RETRACTION_TOL)
        lost = np.flatnonzero(alive)[~valid]
        if lost.size:
            logger.warning(f"{lost.size} Slow SDE path(s) left the manifold basin at step {n + 1}")
        zetas[np.flatnonzero(alive)[valid]] = retracted[valid]
        alive[lost] = False
        if not np.any(alive):
            raise LeftBasinError(f"every Slow SDE path left the manifold basin by step {n + 1}")

        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            steps.append(n + 1)
            times.append((n + 1) * dt)
            records.append(zetas.copy())
            tr_hess.append(sharpness(zetas))

    return SdeEnsemble(np.asarray(steps), np.asarray(times), np.stack(records),
                       np.stack(tr_hess), ~alive)


def integrate_slow_sde(model, kind, zeta0, horizon, dt=None, streams=None, record_every=1):
    """Single Slow SDE path as a TrajectoryRecord; ζ doubles as its own projection."""
    start = time.perf_counter()
    ensemble = integrate_ensemble(model, kind, zeta0, horizon, dt, streams, 1, record_every)
    if ensemble.failed[0]:
        raise LeftBasinError("Slow SDE path left the manifold basin")
    zetas = ensemble.zetas[:, 0, :]
    wall = time.perf_counter() - start
    logger.info(f"Integrated {type(kind).__name__} Slow SDE to T={horizon:g} in {len(ensemble.steps) - 1} records, {wall:.2f}s")
    return TrajectoryRecord(
        rounds=ensemble.steps,
        times=ensemble.times,
        thetas=zetas,
        phis=zetas.copy(),
        dist=np.zeros(len(zetas)),
        loss=model.loss(zetas),
        tr_hess=ensemble.tr_hess[:, 0],
        metadata={"kind": type(kind).__name__, "parameters": vars(kind).copy(), "horizon": horizon,
                  "dt": horizon / max(1, math.ceil(horizon / (dt or default_dt(horizon)) - 1e-9)),
                  "wall_time": wall, "model": model.name},
    )
