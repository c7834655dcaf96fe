"""
Optimizer module for the Slow SDE Laboratory.
Runs parallel SGD, Local SGD and Post-local SGD over ensembles of replicas,
and implements the Linear Scaling Rule transform.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from config import Config
from exceptions import AdmissibilityError, ConfigError
from manifold import gf_project_batch
from models import LossModel
from samplers import SamplerState, draw_batch
from streams import NoiseStreams

logger = logging.getLogger(__name__)

ALGORITHMS = ("parallel", "local", "post_local")


@dataclass
class RunConfig:
    """Hyperparameters of one discrete run."""

    eta: float = 0.01
    K: int = 4
    B_loc: int = 8
    H: int = 1
    rounds: Optional[int] = None
    total_steps: Optional[int] = None
    t0: int = 0
    sampler: str = Config.DEFAULT_SAMPLER
    seed: int = Config.MASTER_SEED
    record_every: int = 1
    algorithm: str = "local"
    project: bool = False
    theta0: Optional[List[float]] = None

    @property
    def alpha(self):
        return self.eta * self.H

    @property
    def batch(self):
        return self.K * self.B_loc

    @property
    def steps(self):
        """Total number of gradient steps per worker."""
        if self.total_steps is not None:
            return self.total_steps
        if self.rounds is not None:
            return self.rounds * self.H
        raise ConfigError("run needs rounds or total_steps", key="run.rounds")

    def validate(self):
        """Check ranges; returns self for chaining."""
        checks = [
            (self.eta > 0, "run.eta", "learning rate must be positive"),
            (self.K >= 1, "run.K", "K must be ≥ 1"),
            (self.B_loc >= 1, "run.B_loc", "B_loc must be ≥ 1"),
            (self.H >= 1, "run.H", "H must be ≥ 1"),
            (self.t0 >= 0, "run.t0", "t0 must be ≥ 0"),
            (self.record_every >= 1, "run.record_every", "record_every must be ≥ 1"),
            (self.algorithm in ALGORITHMS, "run.algorithm", f"algorithm must be one of {ALGORITHMS}"),
            (self.sampler in ("with", "without"), "run.sampler", 'sampler must be "with" or "without"'),
        ]
        for ok, key, message in checks:
            if not ok:
                raise ConfigError(f"{key}: {message}", key=key)
        if self.steps < 0:
            raise ConfigError("run.rounds: must be ≥ 0", key="run.rounds")
        return self

    def describe(self):
        """Plain dict of fields plus derived quantities."""
        out = asdict(self)
        out["alpha"] = self.alpha
        out["B"] = self.batch
        return out


@dataclass
class EnsembleTrace:
    """Snapshots of the global iterate for R replicas at recorded rounds."""

    rounds: np.ndarray
    steps: np.ndarray
    thetas: np.ndarray
    diverged: np.ndarray
    diverged_round: np.ndarray
    excursions: Optional[np.ndarray] = None
    switch_round: Optional[int] = None

    @property
    def replicas(self):
        return self.thetas.shape[1]


@dataclass
class TrajectoryRecord:
    """Time-indexed series of iterates with optional manifold projections."""

    rounds: np.ndarray
    times: np.ndarray
    thetas: np.ndarray
    phis: np.ndarray
    dist: np.ndarray
    loss: np.ndarray
    tr_hess: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.thetas.shape[1]

    def __len__(self):
        return self.rounds.shape[0]

    @classmethod
    def empty(cls, dim, metadata=None):
        return cls(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim)),
                   np.zeros(0), np.zeros(0), np.zeros(0), metadata or {})


def schedule(cfg: RunConfig):
    """Round lengths of the run: 1 for parallel steps, H for local rounds."""
    total = cfg.steps
    if cfg.algorithm == "parallel":
        return [1] * total
    if cfg.algorithm == "local":
        if total % cfg.H:
            raise ConfigError(f"total steps {total} is not a multiple of H={cfg.H}", key="run.H")
        return [cfg.H] * (total // cfg.H)
    if cfg.t0 > total or (total - cfg.t0) % cfg.H:
        raise ConfigError(f"T − t0 = {total - cfg.t0} must be a nonnegative multiple of H={cfg.H}", key="run.t0")
    return [1] * cfg.t0 + [cfg.H] * ((total - cfg.t0) // cfg.H)


def average_iterates(iterates):
    """All-reduce over the worker axis (−2), reduced in worker-index order."""
    anchor = iterates[..., 0, :]
    return anchor + np.mean(iterates - anchor[..., None, :], axis=-2)


def _make_sampler(model, cfg, streams, replicas):
    if model.dataset_size is None:
        if cfg.sampler == "without":
            raise ConfigError("sampling without replacement needs a dataset-backed model", key="run.sampler")
        return None
    if cfg.sampler == "without" and replicas != 1:
        raise ConfigError("sampling without replacement supports a single replica only", key="run.sampler")
    kind = "with_replacement" if cfg.sampler == "with" else "without_replacement"
    return SamplerState(kind, model.dataset_size, cfg.K, cfg.B_loc, streams)


def _worker_gradient(model, theta, cfg, rng, sampler, worker):
    """Stochastic gradient of one worker for every replica: shape (R, d)."""
    if sampler is None:
        return model.grad(theta) + np.mean(model.sample_noise(theta, rng, cfg.B_loc), axis=-2)
    batches = np.stack([draw_batch(sampler, worker, rng) for _ in range(theta.shape[0])])
    return np.mean(model.example_grads(theta, batches, rng), axis=-2)


def simulate_ensemble(model: LossModel, cfg: RunConfig, theta0, replicas=1, streams=None,
                      track_excursions=False):
    """
    Run cfg.algorithm for R replicas at once.

    Worker k's noise at global step t comes from the stream ("sgd", t, k);
    replica r reads row r of each draw, so replica 0 reproduces the single
    run on the same streams.
    """
    cfg.validate()
    streams = streams or NoiseStreams(cfg.seed)
    lengths = schedule(cfg)
    sampler = _make_sampler(model, cfg, streams, replicas)

    theta_bar = np.broadcast_to(np.asarray(theta0, dtype=float), (replicas, model.dim)).copy()
    alive = np.ones(replicas, dtype=bool)
    diverged_round = np.full(replicas, -1)

    rounds, steps, snapshots, excursions = [0], [0], [theta_bar.copy()], []
    if track_excursions:
        excursions.append(np.zeros(replicas))
    switch_round = None
    if cfg.algorithm == "post_local":
        switch_round = min(cfg.t0, len(lengths))

    t_start = 0
    for s, length in enumerate(lengths, start=1):
        workers = np.repeat(theta_bar[:, None, :], cfg.K, axis=1)
        spread = np.zeros(replicas)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(length):
                for k in range(cfg.K):
                    rng = streams.generator("sgd", t_start + j, k)
                    g = _worker_gradient(model, workers[:, k, :], cfg, rng, sampler, k)
                    workers[:, k, :] = workers[:, k, :] - cfg.eta * g
                if track_excursions:
                    gap = np.max(np.linalg.norm(workers - theta_bar[:, None, :], axis=-1), axis=-1)
                    spread = np.maximum(spread, gap)
            new_bar = average_iterates(workers)

        norms = np.linalg.norm(new_bar, axis=-1)
        blown = alive & ~(np.isfinite(norms) & (norms <= Config.DIVERGENCE_NORM))
        if np.any(blown):
            logger.warning(f"{int(np.sum(blown))} replica(s) diverged in round {s} (‖θ‖ > {Config.DIVERGENCE_NORM:g})")
            diverged_round[blown] = s
            alive &= ~blown
        theta_bar = np.where(alive[:, None], new_bar, theta_bar)
        t_start += length

        if s % cfg.record_every == 0 or s == len(lengths):
            rounds.append(s)
            steps.append(t_start)
            snapshots.append(theta_bar.copy())
            if track_excursions:
                excursions.append(np.where(alive, spread, np.nan))
        if not np.any(alive):
            break

    return EnsembleTrace(
        rounds=np.asarray(rounds),
        steps=np.asarray(steps),
        thetas=np.stack(snapshots),
        diverged=~alive,
        diverged_round=diverged_round,
        excursions=np.stack(excursions) if track_excursions else None,
        switch_round=switch_round,
    )


def trajectory_from_trace(model, cfg, trace: EnsembleTrace, replica=0, project=False, wall_time=0.0):
    """Single-replica TrajectoryRecord, truncated at divergence."""
    thetas = trace.thetas[:, replica, :]
    keep = np.ones(len(trace.rounds), dtype=bool)
    if trace.diverged[replica]:
        keep = trace.rounds < trace.diverged_round[replica]
    rounds = trace.rounds[keep]
    thetas = thetas[keep]
    times = trace.steps[keep] * cfg.eta**2

    n = len(rounds)
    phis = np.full((n, model.dim), np.nan)
    dist = np.full(n, np.nan)
    tr_hess = np.full(n, np.nan)
    if project and n:
        points, valid = gf_project_batch(model, thetas)
        phis[valid] = points[valid]
        dist[valid] = np.linalg.norm(thetas[valid] - points[valid], axis=-1)
        for i in np.flatnonzero(valid):
            tr_hess[i] = float(np.trace(model.hessian(points[i])))
        if not np.all(valid):
            logger.warning(f"{int(np.sum(~valid))} recorded iterate(s) projected to the null marker")

    metadata = {
        "config": cfg.describe(),
        "wall_time": wall_time,
        "diverged": bool(trace.diverged[replica]),
        "switch_round": trace.switch_round,
        "model": model.name,
    }
    return TrajectoryRecord(rounds, times, thetas, phis, dist, model.loss(thetas), tr_hess, metadata)


def _run(model, cfg, algorithm, streams, theta0):
    cfg = replace(cfg, algorithm=algorithm)
    start = time.perf_counter()
    theta0 = default_start(model, cfg) if theta0 is None else theta0
    trace = simulate_ensemble(model, cfg, theta0, 1, streams)
    wall = time.perf_counter() - start
    record = trajectory_from_trace(model, cfg, trace, 0, cfg.project, wall)
    logger.info(f"Finished {algorithm} run: {len(record)} records, diverged={record.metadata['diverged']}, {wall:.2f}s")
    return record


def default_start(model, cfg):
    """cfg.theta0 if given, otherwise the model's default initialization."""
    if cfg.theta0 is not None:
        theta0 = np.asarray(cfg.theta0, dtype=float)
        if theta0.shape != (model.dim,):
            raise ConfigError(f"theta0 must have {model.dim} entries", key="run.theta0")
        return theta0
    return model.default_start()


def run_parallel_sgd(model, cfg, streams=None, theta0=None):
    """θ_{t+1} = θ_t − η·(1/K)Σ_k g_{k,t}; cfg.H is ignored."""
    return _run(model, cfg, "parallel", streams, theta0)


def run_local_sgd(model, cfg, streams=None, theta0=None):
    """K independent H-step chains per round, then parameter averaging."""
    return _run(model, cfg, "local", streams, theta0)


def run_post_local_sgd(model, cfg, streams=None, theta0=None):
    """Parallel SGD for t0 steps, Local SGD rounds afterwards."""
    return _run(model, cfg, "post_local", streams, theta0)


def _is_integral(value):
    return abs(value - round(value)) <= 1e-9 * max(1.0, abs(value))


def _nearest_admissible_kappa(cfg, kappa):
    candidates = []
    for h_new in range(1, cfg.H + 1):
        if cfg.H % h_new == 0:
            k = cfg.H / h_new
            if _is_integral(k * cfg.K):
                candidates.append(k)
    return min(candidates, key=lambda k: (abs(math.log(k / kappa)), k)) if candidates else None


def apply_lsr(cfg: RunConfig, kappa):
    """η ↦ κη, K ↦ κK, H ↦ H/κ with B_loc and α unchanged."""
    if kappa <= 0:
        raise AdmissibilityError(f"κ must be positive, got {kappa}")
    k_new, h_new = kappa * cfg.K, cfg.H / kappa
    if not (_is_integral(k_new) and _is_integral(h_new)):
        suggestion = _nearest_admissible_kappa(cfg, kappa)
        raise AdmissibilityError(
            f"κ={kappa} gives K′={k_new:g}, H′={h_new:g}; nearest admissible κ is {suggestion}",
            suggestion=suggestion,
        )
    changes = {"eta": kappa * cfg.eta, "K": int(round(k_new)), "H": int(round(h_new))}
    for name in ("total_steps", "t0"):
        value = getattr(cfg, name)
        if value:
            if not _is_integral(value / kappa):
                raise AdmissibilityError(f"{name}={value} is not divisible by κ={kappa}")
            changes[name] = int(round(value / kappa))
    return replace(cfg, **changes)
