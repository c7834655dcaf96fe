"""
Harness module for the Slow SDE Laboratory.
Monte Carlo experiments comparing the discrete algorithms with their Slow
SDEs, deterministic identity checks, and the acceptance suite behind `verify`.
"""

import asyncio
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from config import Config
from emitters import report_csv_text
from exceptions import AdmissibilityError, ConfigError, DomainError, SlowSdeError
from experiment_base import Assertion, ExperimentBase, Report
from manifold import NULL_MARKER, gf_project, gf_project_batch, make_frame, psi_matrix, second_diff_phi
from models import ModelSpec, NoiseSpec, QuadraticValley, build_model, third_contract
from numerics import big_f, integrate_ode, psi, StopRule, sym_eig
from optim import RunConfig, apply_lsr, run_local_sgd, run_parallel_sgd, run_post_local_sgd, simulate_ensemble
from slowsde import (
    Kappa,
    LabelNoiseLocal,
    LabelNoiseLocalInf,
    LabelNoiseSgd,
    Local,
    LocalInf,
    LocalLsr,
    Sgd,
    brownian_increments,
    coefficients,
    default_dt,
    drift_and_diffusion,
    integrate_ensemble,
    rescale_time,
)
from stats import Estimate, exponential_rate, loglog_slope, mean_and_se, percentile_interval, ratio_estimate
from streams import NoiseStreams

logger = logging.getLogger(__name__)

# Stream families
LOCAL_FAMILY = 0
SGD_FAMILY = 1
SDE_FAMILY = 2
SDE_ALT_FAMILY = 3

_COORDINATES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class TestFunction:
    """Monomial g(θ) such as "1", "y", "y^2", "x*y" or "c3^2"."""

    __test__ = False

    text: str
    powers: tuple = ()

    @classmethod
    def parse(cls, text):
        cleaned = str(text).replace(" ", "")
        if cleaned == "1":
            return cls(text, ())
        factors = []
        for factor in cleaned.split("*"):
            name, _, power = factor.partition("^")
            if name in _COORDINATES:
                index = _COORDINATES[name]
            elif re.fullmatch(r"c\d+", name):
                index = int(name[1:])
            else:
                raise ConfigError(f"cannot parse test function {text!r}", key="harness.test_functions")
            try:
                exponent = int(power) if power else 1
            except ValueError:
                raise ConfigError(f"bad exponent in test function {text!r}", key="harness.test_functions")
            if exponent < 1:
                raise ConfigError(f"exponents must be ≥ 1 in {text!r}", key="harness.test_functions")
            factors.append((index, exponent))
        return cls(text, tuple(factors))

    @property
    def is_constant(self):
        return not self.powers

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        out = np.ones(points.shape[:-1])
        for index, exponent in self.powers:
            if index >= points.shape[-1]:
                raise DomainError(f"test function {self.text!r} needs coordinate {index}")
            out = out * points[..., index] ** exponent
        return out


@dataclass
class HarnessConfig:
    """Everything an experiment needs; built by config_parser from [harness]."""

    experiment: str = "tracking"
    model: ModelSpec = field(default_factory=ModelSpec)
    etas: List[float] = field(default_factory=lambda: [0.04, 0.02, 0.01, 0.005])
    alpha: float = 0.5
    alphas: List[float] = field(default_factory=lambda: [0.5, 1.0])
    alpha_eta: float = 0.01  # η held fixed during the α scan
    K: int = 4
    B_loc: int = 1
    horizon: float = 1.0  # Slow SDE time T
    tracking_time: float = 2.0  # ordinary time η·steps for tracking
    seeds: int = 100
    sde_seeds: Optional[int] = None
    beta: float = Config.BETA
    delta: float = Config.DELTA
    test_functions: List[str] = field(default_factory=lambda: ["y", "y^2"])
    records: int = 20
    dt: Optional[float] = None
    kappas: List[float] = field(default_factory=lambda: [1.0, 2.0])
    eta_h_grid: List[float] = field(default_factory=lambda: [1.0, 20.0])
    drift_eta: float = 0.02
    drift_K: int = 8
    drift_horizon: float = 8.0
    moment_eta: Optional[float] = None
    moment_seeds: int = 10000
    noise_samples: int = 100000
    coupled: bool = False
    theta0: Optional[List[float]] = None
    seed: int = Config.MASTER_SEED
    output: str = Config.OUTPUT_DIR

    @property
    def batch(self):
        return self.K * self.B_loc

    @property
    def n_sde_seeds(self):
        return self.sde_seeds or self.seeds

    def local_steps(self, eta, alpha=None):
        """H = α/η rounded to the nearest positive integer."""
        alpha = self.alpha if alpha is None else alpha
        return max(1, int(round(alpha / eta)))

    def r_grp(self, eta):
        return max(1, math.floor(1.0 / (self.alpha * eta**self.beta)))

    def functions(self):
        return [TestFunction.parse(text) for text in self.test_functions]


def burn_in_rounds(alpha, mu, eta):
    """ceil((20/(αμ))·log(1/η)) rounds."""
    if mu <= 0:
        raise DomainError(f"curvature must be positive, got {mu}")
    return math.ceil(Config.BURN_IN_FACTOR / (alpha * mu) * math.log(1.0 / eta))


def smallest_curvature(model, points, limit=200):
    points = np.asarray(points, dtype=float)
    stride = max(1, len(points) // limit)
    values = []
    for point in points[::stride]:
        eig = sym_eig(model.hessian(point))
        if np.any(eig.nonzero):
            values.append(float(np.min(eig.eigenvalues[eig.nonzero])))
    if not values:
        raise DomainError("no nonzero Hessian eigenvalue on the sampled manifold points")
    return min(values)


def _start(model, cfg):
    if cfg.theta0 is not None:
        theta0 = np.asarray(cfg.theta0, dtype=float)
        if theta0.shape != (model.dim,):
            raise ConfigError(f"theta0 must have {model.dim} entries", key="harness.theta0")
        return theta0
    return model.default_start()


def _manifold_start(model, cfg):
    zeta0 = gf_project(model, _start(model, cfg))
    if zeta0 is NULL_MARKER:
        raise SlowSdeError("the starting point does not project onto the manifold")
    return zeta0


def _run_config(cfg, eta, H, rounds, algorithm="local", record_every=1):
    if algorithm == "parallel":
        return RunConfig(eta=eta, K=cfg.K, B_loc=cfg.B_loc, H=1, total_steps=rounds * H,
                         algorithm="parallel", record_every=record_every, seed=cfg.seed)
    return RunConfig(eta=eta, K=cfg.K, B_loc=cfg.B_loc, H=H, rounds=rounds, algorithm=algorithm,
                     record_every=record_every, seed=cfg.seed)


def _stride(count, records):
    return max(1, count // max(1, records))


class HarnessExperiment(ExperimentBase):
    title = "experiment"

    def __init__(self, cfg: HarnessConfig, threads=1, model=None):
        super().__init__(cfg, threads, name=f"{self.title.title().replace('_', '')}Experiment")
        self.model = model or build_model(cfg.model)
        self.streams = NoiseStreams(cfg.seed)
        self._boot_counter = 0

    def boot_rng(self):
        self._boot_counter += 1
        return self.streams.generator("bootstrap", self._boot_counter)

    def new_report(self):
        return Report(self.title, self.model.name, self.cfg.seed)

    def enough_seeds(self, report, name, count):
        if count < Config.MIN_SEEDS:
            self.notice(report, f"{name}: only {count} seeds (< {Config.MIN_SEEDS}); assertion skipped")
            return False
        return True


class TrackingExperiment(HarnessExperiment):
    """Local SGD against parallel SGD over a fixed ordinary-time horizon."""

    title = "tracking"

    def cell(self, eta):
        cfg = self.cfg
        H = cfg.local_steps(eta)
        rounds = max(1, int(round(cfg.tracking_time / (eta * H))))
        theta0 = _start(self.model, cfg)
        local = simulate_ensemble(self.model, _run_config(cfg, eta, H, rounds), theta0, cfg.seeds,
                                  self.streams.derive(LOCAL_FAMILY))
        sgd_family = LOCAL_FAMILY if cfg.coupled else SGD_FAMILY
        sgd = simulate_ensemble(self.model, _run_config(cfg, eta, H, rounds, "parallel", record_every=H),
                                theta0, cfg.seeds, self.streams.derive(sgd_family))
        if not np.array_equal(local.steps, sgd.steps):
            raise SlowSdeError("tracking records of SGD and Local SGD are misaligned")
        with np.errstate(invalid="ignore"):
            errors = np.max(np.linalg.norm(local.thetas - sgd.thetas, axis=-1), axis=0)
        diverged = local.diverged | sgd.diverged
        return {"eta": eta, "H": H, "rounds": rounds, "errors": errors, "diverged": int(np.sum(diverged))}

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        cells = await self.run_cells(self.cell, cfg.etas)
        kept = []
        for cell in cells:
            label = f"eta={cell['eta']:g}"
            if cell["diverged"]:
                self.notice(report, f"{label}: {cell['diverged']} diverged run(s); configuration excluded")
                continue
            errors = cell["errors"]
            mean, se = mean_and_se(errors) if errors.size > 1 else (float(errors[0]), math.nan)
            report.rows.append({"eta": cell["eta"], "H": cell["H"], "rounds": cell["rounds"],
                                "q_delta": float(np.quantile(errors, cfg.delta)),
                                "median": float(np.median(errors)), "mean": float(mean), "se": float(se),
                                "seeds": errors.size})
            report.samples[label] = errors
            kept.append(cell)

        report.series["tracking"] = ([c["eta"] for c in kept],
                                     [float(np.quantile(c["errors"], cfg.delta)) for c in kept])
        if len(kept) < 2:
            self.notice(report, "fewer than two usable step sizes; no slope fit")
            return report
        if any(np.quantile(c["errors"], cfg.delta) <= 0 for c in kept):
            self.notice(report, "tracking error vanishes (degenerate noise or coupled streams); no slope fit")
            return report

        slope = loglog_slope([c["eta"] for c in kept], [c["errors"] for c in kept],
                             lambda s: np.quantile(s, cfg.delta), self.boot_rng(), name="eta_slope")
        report.fits.append(slope)
        if self.enough_seeds(report, "eta_slope", cfg.seeds):
            self.check_range(report, "tracking_eta_slope", slope.estimate, 0.35, 0.65)
        return report


class ClosenessExperiment(HarnessExperiment):
    """Distance of θ̄ to Φ(θ̄) after burn-in, scanned in η and in α."""

    title = "closeness"

    def cell(self, point):
        eta, alpha = point
        cfg, model = self.cfg, self.model
        H = cfg.local_steps(eta, alpha)
        alpha = eta * H
        theta0 = _start(model, cfg)
        mu0 = smallest_curvature(model, [_manifold_start(model, cfg)])
        burn = burn_in_rounds(alpha, mu0, eta)
        rounds = 2 * burn
        record_every = _stride(rounds, 2 * cfg.records)
        trace = simulate_ensemble(model, _run_config(cfg, eta, H, rounds, record_every=record_every), theta0,
                                  cfg.seeds, self.streams.derive(LOCAL_FAMILY), track_excursions=True)

        n_rec, replicas = trace.thetas.shape[:2]
        points, valid = gf_project_batch(model, trace.thetas.reshape(n_rec * replicas, -1))
        points, valid = points.reshape(trace.thetas.shape), valid.reshape(n_rec, replicas)

        # Burn-in recomputed with the curvature seen along the run
        mu = smallest_curvature(model, points[valid])
        burn = burn_in_rounds(alpha, mu, eta)
        window = trace.rounds > burn
        if np.sum(window) < 2:
            window = trace.rounds > rounds // 2
        with np.errstate(invalid="ignore"):
            dist = np.linalg.norm(trace.thetas - points, axis=-1)
        dist_med = np.nanmedian(np.where(valid, dist, np.nan)[window], axis=0)
        exc_med = np.nanmedian(trace.excursions[window], axis=0)
        return {"eta": eta, "alpha": alpha, "H": H, "burn_in": burn, "mu": mu, "rounds": rounds,
                "dist": dist_med, "excursion": exc_med, "on_manifold": np.all(valid, axis=0),
                "diverged": int(np.sum(trace.diverged))}

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        eta_points = [(eta, cfg.alpha) for eta in cfg.etas]
        alpha_points = [(cfg.alpha_eta, a) for a in cfg.alphas]
        cells = await self.run_cells(self.cell, eta_points + alpha_points)
        eta_cells, alpha_cells = cells[:len(eta_points)], cells[len(eta_points):]

        for scan, group in (("eta", eta_cells), ("alpha", alpha_cells)):
            for cell in group:
                label = f"{scan}_scan eta={cell['eta']:g} alpha={cell['alpha']:g}"
                fraction = float(np.mean(cell["on_manifold"]))
                report.rows.append({"scan": scan, "eta": cell["eta"], "alpha": cell["alpha"], "H": cell["H"],
                                    "burn_in": cell["burn_in"], "mu": cell["mu"],
                                    "median_dist": float(np.nanmedian(cell["dist"])),
                                    "median_excursion": float(np.nanmedian(cell["excursion"])),
                                    "on_manifold_fraction": fraction})
                report.samples[f"{label} dist"] = cell["dist"]
                report.samples[f"{label} excursion"] = cell["excursion"]
                if cell["diverged"]:
                    self.notice(report, f"{label}: {cell['diverged']} diverged run(s)")
                self.check(report, f"projection_on_manifold {label}", fraction >= cfg.delta,
                           f"≥ {cfg.delta:g}", fraction, "fraction of seeds")

        usable = [c for c in eta_cells if not c["diverged"]]
        report.series["closeness"] = ([c["eta"] for c in usable],
                                      [float(np.nanmedian(c["dist"])) for c in usable])
        if len(usable) >= 2:
            slope = loglog_slope([c["eta"] for c in usable], [c["dist"] for c in usable], np.median,
                                 self.boot_rng(), name="eta_slope")
            report.fits.append(slope)
            if self.enough_seeds(report, "eta_slope", cfg.seeds):
                self.check_range(report, "closeness_eta_slope", slope.estimate, 0.35, 0.65)

        # The stationary normal spread of θ̄ is ησ²/(2λB) for any α; only the
        # within-round excursion of the workers grows with α.
        for low, high in zip(alpha_cells, alpha_cells[1:]):
            span = f"{low['alpha']:g}->{high['alpha']:g}"
            report.fits.append(ratio_estimate(high["dist"], low["dist"], np.median, self.boot_rng(),
                                              name=f"alpha_dist_ratio {span}"))
            ratio = ratio_estimate(high["excursion"], low["excursion"], np.median, self.boot_rng(),
                                   name=f"alpha_ratio {span}")
            report.fits.append(ratio)
            if abs(high["alpha"] / low["alpha"] - 2.0) < 1e-9 and self.enough_seeds(report, ratio.name, cfg.seeds):
                self.check_range(report, f"closeness_{ratio.name.replace(' ', '_')}", ratio.estimate, 1.2, 1.7)
        return report


def _sde_values(ensemble, g):
    return g(ensemble.zetas[:, ~ensemble.failed, :])


def _interp_paths(times_out, times_in, values):
    return np.stack([np.interp(times_out, times_in, values[:, r]) for r in range(values.shape[1])], axis=1)


def max_gap(discrete, sde):
    """max over records of |mean(discrete) − mean(sde)| with the pooled SE there."""
    mean_d, se_d = mean_and_se(discrete, axis=1)
    mean_s, se_s = mean_and_se(sde, axis=1)
    gaps = np.abs(mean_d - mean_s)
    i = int(np.argmax(gaps))
    return float(gaps[i]), float(math.hypot(se_d[i], se_s[i]))


def dt_convergence_check(model, kind, zeta0, horizon, dt, streams, replicas=20):
    """Terminal gaps at dt, dt/2 and dt/4 on one Brownian path."""
    fine = dt / 4.0
    finals = {}
    for factor in (4, 2, 1):
        def increments(step, step_dt, shape, factor=factor):
            return sum(brownian_increments(streams, step * factor + j, fine, shape) for j in range(factor))
        ensemble = integrate_ensemble(model, kind, zeta0, horizon, fine * factor, streams, replicas,
                                      record_every=10**9, increments=increments)
        finals[factor] = np.where(ensemble.failed[:, None], np.nan, ensemble.zetas[-1])
    coarse_gap = float(np.nanmean(np.linalg.norm(finals[4] - finals[2], axis=-1)))
    fine_gap = float(np.nanmean(np.linalg.norm(finals[2] - finals[1], axis=-1)))
    return coarse_gap, fine_gap


class WeakApproxExperiment(HarnessExperiment):
    """E[g(Φ(θ̄_s))] of Local SGD against E[g(ζ(sHη²))] of the Local Slow SDE."""

    title = "weak_approx"

    def discrete_cell(self, eta):
        cfg, model = self.cfg, self.model
        H = cfg.local_steps(eta)
        rounds = max(1, int(round(cfg.horizon / (eta * H * eta))))
        trace = simulate_ensemble(model, _run_config(cfg, eta, H, rounds, record_every=_stride(rounds, cfg.records)),
                                  _start(model, cfg), cfg.seeds, self.streams.derive(LOCAL_FAMILY))
        n_rec, replicas = trace.thetas.shape[:2]
        points, valid = gf_project_batch(model, trace.thetas.reshape(n_rec * replicas, -1))
        keep = np.all(valid.reshape(n_rec, replicas), axis=0)
        return {"eta": eta, "H": H, "alpha": eta * H, "times": trace.steps * eta**2,
                "phis": points.reshape(trace.thetas.shape)[:, keep, :], "dropped": int(np.sum(~keep))}

    def sde_cell(self, alpha):
        cfg = self.cfg
        kind = Local(B=cfg.batch, K=cfg.K, eta_h=alpha)
        ensemble = integrate_ensemble(self.model, kind, _manifold_start(self.model, cfg), cfg.horizon, cfg.dt,
                                      self.streams.derive(SDE_FAMILY), cfg.n_sde_seeds)
        return alpha, ensemble

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        discrete = await self.run_cells(self.discrete_cell, cfg.etas)
        alphas = sorted({round(c["alpha"], 12) for c in discrete})
        sdes = dict(await self.run_cells(self.sde_cell, alphas))
        functions = cfg.functions()

        for g in functions:
            gaps = []
            for cell in discrete:
                ensemble = sdes[round(cell["alpha"], 12)]
                sde_vals = _interp_paths(cell["times"], ensemble.times, _sde_values(ensemble, g))
                disc_vals = g(cell["phis"])
                gap, pooled = max_gap(disc_vals, sde_vals)
                rng = self.boot_rng()
                draws = []
                for _ in range(Config.BOOTSTRAP_RESAMPLES):
                    d = disc_vals[:, rng.integers(0, disc_vals.shape[1], disc_vals.shape[1])]
                    s = sde_vals[:, rng.integers(0, sde_vals.shape[1], sde_vals.shape[1])]
                    draws.append(np.max(np.abs(d.mean(axis=1) - s.mean(axis=1))))
                low, high = percentile_interval(draws)
                estimate = Estimate(f"gap {g.text} eta={cell['eta']:g}", gap, low, high)
                report.fits.append(estimate)
                report.rows.append({"g": g.text, "eta": cell["eta"], "H": cell["H"], "max_gap": gap,
                                    "pooled_se": pooled, "gap_low": low, "gap_high": high,
                                    "seeds": disc_vals.shape[1], "sde_seeds": sde_vals.shape[1]})
                report.samples[f"{g.text} eta={cell['eta']:g} final"] = disc_vals[-1]
                report.series[f"discrete {g.text} eta={cell['eta']:g}"] = (cell["times"], disc_vals.mean(axis=1))
                gaps.append((cell, estimate, pooled))
                if cell["dropped"]:
                    self.notice(report, f"eta={cell['eta']:g}: {cell['dropped']} seed(s) projected to the null marker")

            if g.is_constant:
                continue
            ordered = sorted(gaps, key=lambda item: -item[0]["eta"])
            if not self.enough_seeds(report, f"weak gap {g.text}", min(cfg.seeds, cfg.n_sde_seeds)):
                continue
            for (big, big_est, _), (small, small_est, _) in zip(ordered, ordered[1:]):
                self.check(report, f"gap_nonincreasing {g.text} eta {big['eta']:g}->{small['eta']:g}",
                           small_est.low <= big_est.high, f"≤ {big_est.high:.6g}", small_est.low, "95% CI overlap")
            smallest, smallest_est, pooled = ordered[-1]
            self.check(report, f"gap_within_3se {g.text} eta={smallest['eta']:g}",
                       smallest_est.estimate <= 3.0 * pooled, f"≤ {3.0 * pooled:.6g}", smallest_est.estimate,
                       "3 pooled SE")

            positive = [(c["eta"], e.estimate) for c, e, _ in gaps if e.estimate > 0]
            if len(positive) >= 2:
                etas, values = zip(*positive)
                slope = float(np.polyfit(np.log(etas), np.log(values), 1)[0])
                report.fits.append(Estimate(f"gap_exponent {g.text}", slope, math.nan, math.nan))

        for alpha, ensemble in sdes.items():
            for g in functions:
                report.series[f"sde {g.text} alpha={alpha:g}"] = (ensemble.times, _sde_values(ensemble, g).mean(axis=1))

        kind = Local(B=cfg.batch, K=cfg.K, eta_h=alphas[0])
        coarse, fine = dt_convergence_check(self.model, kind, _manifold_start(self.model, cfg), cfg.horizon,
                                            cfg.horizon / 50.0, self.streams.derive(SDE_ALT_FAMILY))
        report.rows.append({"g": "dt_check", "gap_dt_vs_half": coarse, "gap_half_vs_quarter": fine})
        self.check(report, "dt_halving_converges", fine <= coarse, f"≤ {coarse:.6g}", fine, "terminal gap")
        return report


class MomentExperiment(HarnessExperiment):
    """First and second moments of Φ(θ̄_{R_grp}) − Φ(θ̄₀) against their analytic values."""

    title = "moments"

    def targets(self, zeta0, eta):
        cfg = self.cfg
        H = cfg.local_steps(eta)
        alpha = eta * H
        frame = make_frame(self.model, zeta0, alpha)
        eta_e = cfg.r_grp(eta) * alpha * eta
        mean = eta_e / (2 * cfg.batch) * second_diff_phi(self.model, frame,
                                                         frame.sigma + (cfg.K - 1) * psi_matrix(frame, alpha))
        second = eta_e / cfg.batch * frame.sigma_par
        return frame, eta_e, mean, second

    def simulate(self, zeta0, eta):
        cfg = self.cfg
        H = cfg.local_steps(eta)
        rounds = cfg.r_grp(eta)
        trace = simulate_ensemble(self.model, _run_config(cfg, eta, H, rounds, record_every=rounds), zeta0,
                                  cfg.moment_seeds, self.streams.derive(LOCAL_FAMILY))
        points, valid = gf_project_batch(self.model, trace.thetas[-1])
        return points[valid] - zeta0, int(np.sum(~valid))

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        eta = cfg.moment_eta or (0.01 if self.model.name == "block" else 0.001)
        zeta0 = _manifold_start(self.model, cfg)
        frame, eta_e, mean_target, second_target = self.targets(zeta0, eta)
        (delta, dropped), = await self.run_cells(lambda _: self.simulate(zeta0, eta), [None])
        if dropped:
            self.notice(report, f"{dropped} seed(s) projected to the null marker and were dropped")

        basis = frame.tangent_basis
        normal = np.eye(self.model.dim) - frame.p_par
        tangent = delta @ basis
        mean, se = mean_and_se(tangent)
        target_t = basis.T @ mean_target
        report.rows.append({"eta": eta, "H": cfg.local_steps(eta), "R_grp": cfg.r_grp(eta), "eta_e": eta_e,
                            "seeds": delta.shape[0], "dropped": dropped})
        report.samples["delta_phi_tangent"] = tangent
        enough = self.enough_seeds(report, "moments", delta.shape[0])
        for i in range(basis.shape[1]):
            report.rows.append({"moment": "first", "component": i, "mean": float(mean[i]), "se": float(se[i]),
                                "target": float(target_t[i])})
            if enough:
                tol = max(3.0 * float(se[i]), 1e-12)
                self.check(report, f"first_moment_tangent_{i}", abs(mean[i] - target_t[i]) <= tol,
                           f"{target_t[i]:.6g}", mean[i], f"3 SE = {tol:.3g}")

        normal_mean = float(np.linalg.norm(np.mean(delta @ normal.T, axis=0)))
        self.check(report, "first_moment_normal", normal_mean <= 1e-3 * eta_e, "0", normal_mean,
                   f"{1e-3 * eta_e:.3g}")

        products = tangent[:, :, None] * tangent[:, None, :]
        second, second_se = mean_and_se(products)
        target_tt = basis.T @ second_target @ basis
        for i in range(basis.shape[1]):
            for j in range(i, basis.shape[1]):
                report.rows.append({"moment": "second", "component": f"{i}{j}", "mean": float(second[i, j]),
                                    "se": float(second_se[i, j]), "target": float(target_tt[i, j])})
                if enough:
                    tol = max(3.0 * float(second_se[i, j]), 1e-12)
                    self.check(report, f"second_moment_tangent_{i}{j}", abs(second[i, j] - target_tt[i, j]) <= tol,
                               f"{target_tt[i, j]:.6g}", second[i, j], f"3 SE = {tol:.3g}")
        normal_second = float(np.mean(np.sum((delta @ normal.T) ** 2, axis=1)))
        self.check(report, "second_moment_normal", normal_second <= 1e-3 * eta_e, "o(η_e)", normal_second,
                   f"{1e-3 * eta_e:.3g}")
        return report


class DriftRatioExperiment(HarnessExperiment):
    """Decay rate of E[y] under Local SGD relative to SGD with Hessian-aligned noise."""

    title = "drift_ratio"

    def __init__(self, cfg, threads=1, model=None):
        if model is None and (cfg.model.name != "valley" or cfg.model.noise != "hessian_aligned"):
            logger.warning("drift_ratio runs on the valley with Hessian-aligned noise; overriding the model")
            cfg = replace(cfg, model=replace(cfg.model, name="valley", noise="hessian_aligned"))
        super().__init__(cfg, threads, model)

    def cell(self, eta_h):
        # None: the SGD baseline; 0: H = 1
        cfg, eta = self.cfg, self.cfg.drift_eta
        base = replace(cfg, K=cfg.drift_K)
        steps = max(1, int(round(cfg.drift_horizon / eta**2)))
        zeta0 = _manifold_start(self.model, cfg)
        if eta_h is None:
            run = _run_config(base, eta, 1, steps, "parallel", record_every=_stride(steps, cfg.records))
            streams = self.streams.derive(SGD_FAMILY)
            H = 1
        else:
            H = max(1, int(round(eta_h / eta))) if eta_h > 0 else 1
            rounds = max(1, int(round(steps / H)))
            run = _run_config(base, eta, H, rounds, record_every=_stride(rounds, cfg.records))
            streams = self.streams.derive(LOCAL_FAMILY)
        trace = simulate_ensemble(self.model, run, zeta0, cfg.seeds, streams)
        ys = trace.thetas[:, ~trace.diverged, 1]
        return {"eta_h": eta_h, "H": H, "times": trace.steps * eta**2, "ys": ys,
                "diverged": int(np.sum(trace.diverged))}

    @staticmethod
    def _rate(cell, picks=None):
        ys = cell["ys"] if picks is None else cell["ys"][:, picks]
        return exponential_rate(cell["times"], ys.mean(axis=1))

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        K, eta = cfg.drift_K, cfg.drift_eta
        cells = await self.run_cells(self.cell, [None, 0.0] + list(cfg.eta_h_grid))
        sgd = cells[0]
        sgd_rate = self._rate(sgd)
        report.series["decay sgd"] = (sgd["times"], sgd["ys"].mean(axis=1))
        enough = self.enough_seeds(report, "drift_ratio", cfg.seeds)

        for cell in cells:
            label = "sgd" if cell["eta_h"] is None else "H=1" if cell["eta_h"] == 0 else f"etaH={cell['eta_h']:g}"
            if cell["diverged"]:
                self.notice(report, f"{label}: {cell['diverged']} diverged run(s) excluded")
            report.samples[f"{label} final_y"] = cell["ys"][-1]
            if cell is sgd:
                report.rows.append({"cell": label, "H": 1, "rate": sgd_rate})
                continue

            rate = self._rate(cell)
            rng = self.boot_rng()
            draws = []
            for _ in range(Config.BOOTSTRAP_RESAMPLES):
                a = rng.integers(0, cell["ys"].shape[1], cell["ys"].shape[1])
                b = rng.integers(0, sgd["ys"].shape[1], sgd["ys"].shape[1])
                try:
                    draws.append(self._rate(cell, a) / self._rate(sgd, b))
                except DomainError:
                    continue
            ratio = Estimate(f"ratio {label}", rate / sgd_rate, *percentile_interval(draws))
            report.fits.append(ratio)
            y_bar = float(np.mean(cell["ys"].mean(axis=1)))
            alpha = eta * cell["H"]
            predicted = 1.0 + (K - 1) * psi(2.0 * alpha * (1.0 + y_bar**2))
            report.rows.append({"cell": label, "H": cell["H"], "rate": rate, "ratio": ratio.estimate,
                                "ratio_low": ratio.low, "ratio_high": ratio.high, "y_bar": y_bar,
                                "predicted": predicted})
            report.series[f"decay local {label}"] = (cell["times"], cell["ys"].mean(axis=1))
            if not enough:
                continue
            if cell["eta_h"] == 0:
                self.check_range(report, "ratio_H1", ratio.estimate, 0.9, 1.1)
                continue
            self.check(report, f"ratio_matches_psi {label}", abs(ratio.estimate / predicted - 1.0) <= 0.15,
                       f"{predicted:.6g}", ratio.estimate, "15% relative")
            if cell["eta_h"] >= 10.0:
                self.check_range(report, f"ratio_large_etaH {label}", ratio.estimate, 0.85 * K, 1.15 * K)
        return report


def _pair_gap(first, second):
    scale = max(1.0, float(np.max(np.abs(first.b))), float(np.max(np.abs(first.A))))
    return max(float(np.max(np.abs(first.b - second.b))), float(np.max(np.abs(first.A - second.A)))) / scale


class LsrExperiment(HarnessExperiment):
    """Linear Scaling Rule identities of the Slow SDE family plus a sampling check."""

    title = "lsr"

    def identity_checks(self, report, frame):
        cfg, model = self.cfg, self.model
        B, K = cfg.batch, cfg.K
        tol = 1e-12
        pairs = [
            ("kappa_equals_sgd", Kappa(1.0 / B, 1.0 / (2 * B)), Sgd(B)),
            ("kappa_equals_local_inf", Kappa(1.0 / B, K / (2.0 * B)), LocalInf(B, K)),
            ("local_k1_equals_sgd", Local(B, 1, cfg.alpha), Sgd(B)),
        ]
        for name, left, right in pairs:
            gap = _pair_gap(drift_and_diffusion(model, frame, left), drift_and_diffusion(model, frame, right))
            self.check(report, name, gap <= tol, "0", gap, f"{tol:g}")

        inf, sgd = drift_and_diffusion(model, frame, LocalInf(B, K)), drift_and_diffusion(model, frame, Sgd(B))
        drift_gap = float(np.max(np.abs(inf.b - K * sgd.b))) / max(1.0, float(np.max(np.abs(inf.b))))
        self.check(report, "local_inf_drift_k_times_sgd", drift_gap <= tol, "0", drift_gap, f"{tol:g}")
        diffusion_gap = float(np.max(np.abs(inf.A - sgd.A)))
        self.check(report, "local_inf_diffusion_equals_sgd", diffusion_gap <= tol, "0", diffusion_gap, f"{tol:g}")

        base = RunConfig(eta=cfg.alpha_eta, K=K, B_loc=cfg.B_loc, H=cfg.local_steps(cfg.alpha_eta), rounds=1)
        admissible = []
        for kappa in cfg.kappas:
            try:
                scaled = apply_lsr(base, kappa)
            except AdmissibilityError as e:
                self.notice(report, f"κ={kappa:g} skipped: {e}")
                continue
            admissible.append(kappa)
            self.check(report, f"alpha_invariant kappa={kappa:g}", abs(scaled.alpha - base.alpha) <= 1e-12,
                       f"{base.alpha:g}", scaled.alpha, "1e-12")
            sgd_after = rescale_time(drift_and_diffusion(model, frame, Sgd(scaled.batch)), kappa)
            gap = _pair_gap(sgd_after, drift_and_diffusion(model, frame, Sgd(B)))
            self.check(report, f"sgd_lsr_invariance kappa={kappa:g}", gap <= tol, "0", gap, f"{tol:g}")

            coefficient = coefficients(LocalLsr(B, K, kappa, cfg.alpha)).drift_two
            expected = (kappa * K - 1) / (2 * B)
            self.check(report, f"local_lsr_drift_two kappa={kappa:g}", coefficient == expected,
                       f"{expected:.17g}", coefficient, "exact")

            local_after = rescale_time(drift_and_diffusion(model, frame, Local(scaled.batch, scaled.K, cfg.alpha)), kappa)
            gap = _pair_gap(local_after, drift_and_diffusion(model, frame, LocalLsr(B, K, kappa, cfg.alpha)))
            self.check(report, f"local_lsr_identity kappa={kappa:g}", gap <= tol, "0", gap, f"{tol:g}")
        return admissible

    def sampling_cell(self, job):
        kappa, scaled = job
        cfg = self.cfg
        zeta0 = _manifold_start(self.model, cfg)
        batch = cfg.batch * kappa if scaled else cfg.batch
        horizon = cfg.horizon * kappa if scaled else cfg.horizon
        dt = (cfg.dt or default_dt(cfg.horizon)) * (kappa if scaled else 1.0)
        family = SDE_ALT_FAMILY if scaled else SDE_FAMILY
        ensemble = integrate_ensemble(self.model, Sgd(batch), zeta0, horizon, dt, self.streams.derive(family),
                                      cfg.n_sde_seeds, record_every=10**9)
        return ensemble.zetas[-1][~ensemble.failed]

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        frame = make_frame(self.model, _manifold_start(self.model, cfg), cfg.alpha)
        admissible = self.identity_checks(report, frame)

        jobs = [(kappa, scaled) for kappa in admissible if kappa != 1.0 for scaled in (False, True)]
        finals = await self.run_cells(self.sampling_cell, jobs)
        enough = self.enough_seeds(report, "lsr sampling", cfg.n_sde_seeds) if jobs else False
        for i in range(0, len(jobs), 2):
            kappa = jobs[i][0]
            for g in cfg.functions():
                if g.is_constant:
                    continue
                plain, rescaled = g(finals[i]), g(finals[i + 1])
                m1, s1 = mean_and_se(plain)
                m2, s2 = mean_and_se(rescaled)
                bound = 3.0 * math.hypot(s1, s2)
                report.rows.append({"kappa": kappa, "g": g.text, "mean_sgd": float(m1), "mean_rescaled": float(m2),
                                    "se": math.hypot(s1, s2)})
                report.samples[f"kappa={kappa:g} {g.text} plain"] = plain
                report.samples[f"kappa={kappa:g} {g.text} rescaled"] = rescaled
                if enough:
                    self.check(report, f"lsr_sampling kappa={kappa:g} {g.text}", abs(m1 - m2) <= bound,
                               f"≤ {bound:.6g}", abs(m1 - m2), "3 SE")
        return report


class LrEquivalenceExperiment(HarnessExperiment):
    """Label-noise SGD to K·T against the K-worker large-ηH flow to T, plus a finite-ηH oracle."""

    title = "lr_equivalence"

    async def _run_experiment(self):
        cfg, report, model = self.cfg, self.new_report(), self.model
        B, K, T = cfg.batch, cfg.K, cfg.horizon
        zeta0 = _manifold_start(model, cfg)
        steps = math.ceil(T / (cfg.dt or default_dt(T)) - 1e-9)
        dt = T / steps
        streams = self.streams.derive(SDE_FAMILY)

        def flow(job):
            kind, horizon = job
            return integrate_ensemble(model, kind, zeta0, horizon, horizon / steps, streams, 1, record_every=10**9)

        sgd, inf, local = await self.run_cells(flow, [(LabelNoiseSgd(B), K * T), (LabelNoiseLocalInf(B, K), T),
                                                      (LabelNoiseLocal(B, K, cfg.alpha), T)])
        end_sgd, end_inf, end_local = sgd.zetas[-1, 0], inf.zetas[-1, 0], local.zetas[-1, 0]
        gap = float(np.linalg.norm(end_sgd - end_inf))
        self.check(report, "sgd_KT_equals_local_inf_T", gap <= 1e-8, "0", gap, "1e-8")
        report.rows.append({"flow": "label_noise_sgd", "horizon": K * T, "y_end": float(end_sgd[1])})
        report.rows.append({"flow": "label_noise_local_inf", "horizon": T, "y_end": float(end_inf[1])})
        report.series["label_noise_sgd (time/K)"] = (sgd.times / K, sgd.zetas[:, 0, 1])
        report.series["label_noise_local_inf"] = (inf.times, inf.zetas[:, 0, 1])

        if isinstance(model, QuadraticValley):
            y0 = float(zeta0[1])
            closed = y0 * math.exp(-K * T / (2 * B))
            rel = abs(float(end_inf[1]) - closed) / abs(closed)
            self.check(report, "local_inf_closed_form", rel <= 2 * dt, f"{closed:.10g}", float(end_inf[1]),
                       f"{2 * dt:g} relative")

            def reduced(y):
                return -y * (1 + (K - 1) * psi(2 * cfg.alpha * (1 + y[0] ** 2))) / (2 * B)

            oracle = float(integrate_ode(reduced, np.array([y0]), StopRule.fixed(T), 1e-12)[0])
            rel = abs(float(end_local[1]) - oracle) / abs(oracle)
            report.rows.append({"flow": "label_noise_local", "horizon": T, "y_end": float(end_local[1]),
                                "oracle": oracle})
            self.check(report, "local_finite_etaH_oracle", rel <= 2 * dt, f"{oracle:.10g}", float(end_local[1]),
                       f"{2 * dt:g} relative")
        tr = local.tr_hess[:, 0]
        self.check(report, "sharpness_decreases", bool(np.all(np.diff(tr) < 0)), "strictly decreasing",
                   float(np.max(np.diff(tr))), "per recorded step")
        return report


class DiffusionExperiment(HarnessExperiment):
    """Tangent variance of the Slow SDE scales with κ₁; doubling K at fixed B_loc halves it."""

    title = "diffusion"

    def __init__(self, cfg, threads=1, model=None):
        if model is None and cfg.model.name != "block":
            model = build_model(ModelSpec(name="block", dim=4, eigenvalues=[1.0, 2.0]))
        super().__init__(cfg, threads, model)

    def cell(self, job):
        index, kind = job
        cfg = self.cfg
        zeta0 = _manifold_start(self.model, cfg)
        dt = cfg.dt or cfg.horizon / 50.0
        ensemble = integrate_ensemble(self.model, kind, zeta0, cfg.horizon, dt,
                                      self.streams.derive(SDE_FAMILY + 10 * (index + 1)), cfg.seeds,
                                      record_every=10**9)
        frame = make_frame(self.model, zeta0)
        tangent = (ensemble.zetas[-1][~ensemble.failed] - zeta0) @ frame.tangent_basis
        return np.sum(tangent**2, axis=1), frame

    async def _run_experiment(self):
        cfg, report = self.cfg, self.new_report()
        B_loc, K, T = cfg.B_loc, cfg.K, cfg.horizon
        kappa1 = 1.0 / cfg.batch
        jobs = [
            Kappa(kappa1, 1.0 / (2 * cfg.batch)),
            Kappa(2 * kappa1, 1.0 / (2 * cfg.batch)),
            LocalInf(K * B_loc, K),
            LocalInf(2 * K * B_loc, 2 * K),
        ]
        results = await self.run_cells(self.cell, list(enumerate(jobs)))
        frame = results[0][1]
        trace_par = float(np.trace(frame.sigma_par))
        enough = self.enough_seeds(report, "diffusion", cfg.seeds)

        for (squares, _), kind in zip(results, jobs):
            c0 = coefficients(kind).diffusion
            expected = c0 * T * trace_par
            mean, se = mean_and_se(squares)
            report.rows.append({"kind": repr(kind), "variance": float(mean), "se": float(se), "expected": expected})
            report.samples[repr(kind)] = squares
            if enough:
                self.check(report, f"variance {repr(kind)}", abs(mean - expected) <= 3 * se, f"{expected:.6g}",
                           mean, "3 SE")

        for (name, num, den, target) in (("kappa1_doubling", 1, 0, 2.0), ("workers_doubling", 3, 2, 0.5)):
            ratio = ratio_estimate(results[num][0], results[den][0], np.mean, self.boot_rng(), name=name,
                                   level=0.997)
            report.fits.append(ratio)
            if enough:
                self.check(report, f"diffusion_{name}", ratio.contains(target), f"{target:g}", ratio.estimate,
                           f"99.7% CI [{ratio.low:.3g}, {ratio.high:.3g}]")
        return report


class LabelNoiseLemmaExperiment(HarnessExperiment):
    """Σ(θ) = ∇²L(θ) at an interpolating point of the label-noise classifier."""

    title = "label_noise"

    def __init__(self, cfg, threads=1, model=None):
        if model is None and cfg.model.name != "softmax":
            model = build_model(ModelSpec(name="softmax"))
        super().__init__(cfg, threads, model)

    def sample_covariance(self, theta):
        z = self.model.sample_noise(theta, self.streams.generator("data", 0), self.cfg.noise_samples)
        return np.cov(z, rowvar=False)

    async def _run_experiment(self):
        report, model = self.new_report(), self.model
        theta = model.find_interpolating_point()
        hessian = model.hessian(theta)
        (sigma_hat,) = await self.run_cells(self.sample_covariance, [theta])
        scale = float(np.linalg.norm(hessian))
        rel = float(np.linalg.norm(sigma_hat - hessian)) / scale
        analytic = float(np.linalg.norm(model.noise_covariance(theta) - hessian)) / scale
        report.rows.append({"samples": self.cfg.noise_samples, "relative_error": rel, "analytic_error": analytic,
                            "grad_norm": float(np.linalg.norm(model.grad(theta)))})
        self.check(report, "sampled_covariance_matches_hessian", rel <= 0.1, "≤ 0.1", rel, "relative Frobenius")
        self.check(report, "analytic_covariance_matches_hessian", analytic <= 1e-6, "≤ 1e-6", analytic,
                   "relative Frobenius")
        return report


class SpecialFunctionChecks(HarnessExperiment):
    title = "special_functions"

    def __init__(self, cfg, threads=1, model=None):
        super().__init__(cfg, threads, model or QuadraticValley())

    async def _run_experiment(self):
        report = self.new_report()
        self.check(report, "psi(0)", psi(0.0) == 0.0, "0", psi(0.0), "exact")
        value = psi(1.0)
        self.check(report, "psi(1)", abs(value - math.exp(-1)) <= 1e-12, f"{math.exp(-1):.12g}", value, "1e-12")
        value = psi(4.0)
        self.check(report, "psi(4)", abs(value - (math.exp(-4) + 3) / 4) <= 1e-12,
                   f"{(math.exp(-4) + 3) / 4:.12g}", value, "1e-12")
        grid = np.linspace(0.0, 100.0, 10001)
        values = psi(grid)
        steps = float(np.min(np.diff(values)))
        self.check(report, "psi_monotone", steps > 0 and values.max() < 1.0, "> 0", steps, "min increment")
        h = 1e-3
        worst = max(abs((big_f(x + h) - big_f(x - h)) / (2 * h) - psi(x)) for x in (0.1, 1.0, 5.0, 20.0))
        self.check(report, "F_prime_equals_psi", worst <= 1e-6, "0", worst, "1e-6")
        ratio = big_f(50.0) / 50.0
        self.check_range(report, "F(50)/50", ratio, 0.85, 1.0)
        report.series["psi"] = (grid[grid <= 12.0], values[grid <= 12.0])
        return report


class GeometryChecks(HarnessExperiment):
    """Projector, Φ and ∂²Φ consistency on the valley."""

    title = "geometry"

    def __init__(self, cfg, threads=1, model=None):
        super().__init__(cfg, threads, model or QuadraticValley())

    async def _run_experiment(self):
        report, model = self.new_report(), self.model
        idempotence = hessian_gap = phi_gap = aligned_gap = 0.0
        tangent_fd = normal_fd = 0.0
        eps = 1e-4
        aligned = QuadraticValley(NoiseSpec("hessian_aligned", 1.0))
        for y in np.linspace(-3.0, 3.0, 10):
            zeta = np.array([0.0, y])
            frame = make_frame(model, zeta)
            idempotence = max(idempotence, float(np.linalg.norm(frame.p_par @ frame.p_par - frame.p_par)))
            hessian_gap = max(hessian_gap, float(np.linalg.norm(frame.p_par @ frame.hessian))
                              / float(np.linalg.norm(frame.hessian)))
            once = gf_project(model, zeta + np.array([0.1, 0.0]))
            twice = gf_project(model, once)
            phi_gap = max(phi_gap, float(np.linalg.norm(twice - once)))

            tangent_fd = max(tangent_fd, float(np.linalg.norm((gf_project(model, zeta + eps * frame.tangent_basis[:, 0])
                                                               - zeta) / eps - frame.tangent_basis[:, 0])))
            normal = frame.eig.eigenvectors[:, 0]
            normal_fd = max(normal_fd, float(np.linalg.norm((gf_project(model, zeta + eps * normal) - zeta) / eps)))

            frame_aligned = make_frame(aligned, zeta)
            lhs = -frame_aligned.p_par @ third_contract(aligned, zeta, frame_aligned.hat_sigma_diamond) / 2
            rhs = -frame_aligned.p_par @ third_contract(aligned, zeta, np.eye(2)) / 4
            aligned_gap = max(aligned_gap, float(np.max(np.abs(lhs - rhs))))

        self.check(report, "projector_idempotent", idempotence <= 1e-8, "0", idempotence, "1e-8")
        self.check(report, "projector_annihilates_hessian", hessian_gap <= 1e-6, "0", hessian_gap, "1e-6 relative")
        tol = 2 * Config.PROJECTION_TOL
        self.check(report, "phi_idempotent", phi_gap <= max(tol, 1e-9), "0", phi_gap, f"{max(tol, 1e-9):g}")
        self.check(report, "dphi_tangent_fd", tangent_fd <= 1e-3, "0", tangent_fd, "1e-3")
        self.check(report, "dphi_normal_fd", normal_fd <= 1e-3, "0", normal_fd, "1e-3")
        self.check(report, "hessian_aligned_drift_is_trace_gradient", aligned_gap <= 1e-8, "0", aligned_gap, "1e-8")

        zeta = np.array([0.0, 1.0])
        frame = make_frame(model, zeta)
        exx = np.array([[1.0, 0.0], [0.0, 0.0]])
        value = second_diff_phi(model, frame, exx)
        gap = float(np.max(np.abs(value - np.array([0.0, -0.5]))))
        self.check(report, "second_diff_phi_exx", gap <= 1e-6, "(0, -0.5)", float(value[1]), "1e-6")

        h = 1e-4
        plus = gf_project(model, zeta + np.array([h, 0.0]), tol=1e-13)
        minus = gf_project(model, zeta - np.array([h, 0.0]), tol=1e-13)
        fd = (plus + minus - 2 * zeta) / h**2
        rel = float(np.linalg.norm(fd - value)) / float(np.linalg.norm(value))
        self.check(report, "second_diff_phi_fd_oracle", rel <= 1e-3, f"{value[1]:.6g}", float(fd[1]), "1e-3 relative")
        return report


class EquivalenceChecks(HarnessExperiment):
    """Bit-exact reductions among the discrete algorithms."""

    title = "equivalence"

    def __init__(self, cfg, threads=1, model=None):
        super().__init__(cfg, threads, model or QuadraticValley())

    async def _run_experiment(self):
        report, model = self.new_report(), self.model
        base = RunConfig(eta=0.05, K=4, B_loc=2, H=4, total_steps=40, seed=self.cfg.seed)
        streams = self.streams.derive(LOCAL_FAMILY)

        def gap(first, second):
            same = first.thetas.shape == second.thetas.shape and np.array_equal(first.thetas, second.thetas)
            if same:
                return 0.0
            if first.thetas.shape != second.thetas.shape:
                return math.inf
            return float(np.max(np.abs(first.thetas - second.thetas)))

        parallel = run_parallel_sgd(model, base, streams)
        local_h1 = run_local_sgd(model, replace(base, H=1), streams)
        value = gap(local_h1, parallel)
        self.check(report, "local_H1_equals_parallel", value == 0.0, "0", value, "bit-exact")

        local = run_local_sgd(model, base, streams)
        value = gap(run_post_local_sgd(model, replace(base, t0=0), streams), local)
        self.check(report, "post_local_t0_zero_equals_local", value == 0.0, "0", value, "bit-exact")
        post_all = run_post_local_sgd(model, replace(base, t0=base.total_steps), streams)
        value = gap(post_all, parallel)
        self.check(report, "post_local_t0_T_equals_parallel", value == 0.0, "0", value, "bit-exact")

        quiet = QuadraticValley(NoiseSpec("isotropic", 0.0))
        noiseless = run_local_sgd(quiet, base, streams)
        theta = quiet.default_start()[None, :]
        expected = [theta[0].copy()]
        for step in range(1, base.total_steps + 1):
            theta = theta - base.eta * quiet.grad(theta)
            if step % base.H == 0:
                expected.append(theta[0].copy())
        expected = np.array(expected)
        value = 0.0 if np.array_equal(noiseless.thetas, expected) else float(np.max(np.abs(noiseless.thetas - expected)))
        self.check(report, "zero_noise_equals_gd", value == 0.0, "0", value, "bit-exact")
        return report


class DeterminismCheck(HarnessExperiment):
    """The same experiment under two thread caps yields byte-identical report CSVs."""

    title = "determinism"

    async def _run_experiment(self):
        report = self.new_report()
        cfg = replace(self.cfg, experiment="tracking", etas=sorted(self.cfg.etas)[:2])
        texts = []
        for threads in (1, max(2, self.threads)):
            inner = await TrackingExperiment(cfg, threads, self.model).run()
            texts.append(report_csv_text(inner))
        identical = texts[0] == texts[1]
        self.check(report, "identical_csv_across_threads", identical, "identical", float(identical), "bytes")
        return report


EXPERIMENTS = {
    "tracking": TrackingExperiment,
    "closeness": ClosenessExperiment,
    "weak_approx": WeakApproxExperiment,
    "moments": MomentExperiment,
    "drift_ratio": DriftRatioExperiment,
    "lsr": LsrExperiment,
    "lr_equivalence": LrEquivalenceExperiment,
    "diffusion": DiffusionExperiment,
    "label_noise": LabelNoiseLemmaExperiment,
    "special_functions": SpecialFunctionChecks,
    "geometry": GeometryChecks,
    "equivalence": EquivalenceChecks,
    "determinism": DeterminismCheck,
}

COMPARE_EXPERIMENTS = ("tracking", "closeness", "weak_approx", "drift_ratio", "lsr", "lr_equivalence",
                       "diffusion", "label_noise")


def make_experiment(cfg: HarnessConfig, threads=1):
    try:
        cls = EXPERIMENTS[cfg.experiment]
    except KeyError:
        raise ConfigError(f"unknown experiment: {cfg.experiment}", key="harness.experiment")
    return cls(cfg, threads)


def _run_sync(cls, cfg, threads):
    return asyncio.run(cls(cfg, threads).run())


def tracking_experiment(cfg, threads=1):
    return _run_sync(TrackingExperiment, cfg, threads)


def closeness_experiment(cfg, threads=1):
    return _run_sync(ClosenessExperiment, cfg, threads)


def weak_approx_experiment(cfg, threads=1):
    return _run_sync(WeakApproxExperiment, cfg, threads)


def moment_experiment(cfg, threads=1):
    return _run_sync(MomentExperiment, cfg, threads)


def drift_ratio_experiment(cfg, threads=1):
    return _run_sync(DriftRatioExperiment, cfg, threads)


def lsr_experiment(cfg, threads=1):
    return _run_sync(LsrExperiment, cfg, threads)


def lr_equivalence_experiment(cfg, threads=1):
    return _run_sync(LrEquivalenceExperiment, cfg, threads)


def diffusion_experiment(cfg, threads=1):
    return _run_sync(DiffusionExperiment, cfg, threads)


def label_noise_lemma_experiment(cfg, threads=1):
    return _run_sync(LabelNoiseLemmaExperiment, cfg, threads)


def special_function_checks(cfg=None, threads=1):
    return _run_sync(SpecialFunctionChecks, cfg or HarnessConfig(), threads)


def geometry_checks(cfg=None, threads=1):
    return _run_sync(GeometryChecks, cfg or HarnessConfig(), threads)


def equivalence_checks(cfg=None, threads=1):
    return _run_sync(EquivalenceChecks, cfg or HarnessConfig(), threads)


def determinism_check(cfg, threads=2):
    return _run_sync(DeterminismCheck, cfg, threads)


def acceptance_configs(base: HarnessConfig, scale="full"):
    """(criterion, HarnessConfig) pairs of the acceptance suite."""
    if scale not in ("full", "smoke"):
        raise ConfigError(f"verify.scale must be full or smoke, got {scale}", key="verify.scale")
    full = scale == "full"
    valley = ModelSpec(name="valley", noise="isotropic", noise_scale=1.0)
    block = ModelSpec(name="block", noise="isotropic", noise_scale=1.0, dim=4, eigenvalues=[1.0, 2.0])
    common = replace(base, model=valley, K=4, B_loc=1, alpha=0.5, theta0=None)

    tracking = replace(common, experiment="tracking", seeds=100 if full else 30,
                       etas=[0.04, 0.02, 0.01, 0.005] if full else [0.04, 0.02, 0.01])
    return [
        ("1 special functions", replace(common, experiment="special_functions")),
        ("2 geometry", replace(common, experiment="geometry")),
        ("3 algorithm equivalences", replace(common, experiment="equivalence")),
        ("4 tracking scaling", tracking),
        ("5 closeness", replace(common, experiment="closeness", seeds=100 if full else 30,
                                etas=[0.04, 0.02, 0.01, 0.005] if full else [0.04, 0.02, 0.01],
                                alphas=[0.5, 1.0], alpha_eta=0.01)),
        ("6 weak approximation", replace(common, experiment="weak_approx", seeds=200 if full else 30,
                                         etas=[0.02, 0.01, 0.005] if full else [0.04, 0.02],
                                         test_functions=["y", "y^2"], horizon=1.0 if full else 0.25)),
        ("7 drift amplification", replace(common, experiment="drift_ratio",
                                          model=replace(valley, noise="hessian_aligned"), seeds=100 if full else 30,
                                          drift_K=8, drift_eta=0.02, drift_horizon=8.0 if full else 2.0,
                                          eta_h_grid=[1.0, 20.0])),
        ("8 moments block", replace(common, experiment="moments", model=block, moment_eta=0.01,
                                    moment_seeds=10000 if full else 1000)),
        ("8 moments valley", replace(common, experiment="moments", moment_eta=0.001, theta0=[0.0, 1.0],
                                     moment_seeds=10000 if full else 1000)),
        ("9 linear scaling rule", replace(common, experiment="lsr", kappas=[1.0, 2.0], seeds=100 if full else 30,
                                          horizon=0.5 if full else 0.1)),
        ("10 label-noise lemma", replace(common, experiment="label_noise", model=ModelSpec(name="softmax"),
                                         noise_samples=100000)),
        ("11 determinism", replace(tracking, experiment="determinism", seeds=30)),
    ]


async def run_acceptance(base: HarnessConfig, scale="full", threads=1):
    """Run every acceptance criterion; returns (criterion, Report) pairs."""
    results = []
    for criterion, cfg in acceptance_configs(base, scale):
        logger.info(f"Acceptance criterion {criterion}")
        try:
            report = await make_experiment(cfg, threads).run()
        except SlowSdeError as e:
            logger.error(f"Error running acceptance criterion {criterion}: {e}")
            report = Report(cfg.experiment, cfg.model.name, cfg.seed)
            report.assertions.append(Assertion(f"{criterion} completed", "no error", math.nan, str(e), False))
        results.append((criterion, report))
    return results
