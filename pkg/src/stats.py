"""
Statistics module for the Slow SDE Laboratory.
Seed-level Monte Carlo summaries: standard errors, log-log slope fits and
bootstrap confidence intervals.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from config import Config
from exceptions import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Estimate:
    """A point estimate with a confidence interval."""

    name: str
    estimate: float
    low: float
    high: float

    def contains(self, value):
        return self.low <= value <= self.high


def _samples(values, minimum=2):
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size < minimum:
        raise DomainError(f"need at least {minimum} finite samples, got {arr.size}")
    return arr


def mean_and_se(values, axis=0):
    """Sample mean and standard error along the seed axis."""
    arr = np.asarray(values, dtype=float)
    n = arr.shape[axis]
    if n < 2:
        raise DomainError("a standard error needs at least two seeds")
    return np.mean(arr, axis=axis), np.std(arr, axis=axis, ddof=1) / np.sqrt(n)


def percentile_interval(draws, level=0.95):
    """Central percentile interval of bootstrap draws; (nan, nan) when there are none."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        return math.nan, math.nan
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(draws, [tail, 1.0 - tail])
    return float(low), float(high)


def fit_slope(xs, ys):
    """Least-squares slope of ys on xs."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.size < 2:
        raise DomainError("a slope fit needs at least two points")
    return float(sps.linregress(xs, ys).slope)


def loglog_slope(xs, sample_sets, statistic, rng, name="slope", resamples=None, level=0.95):
    """
    Slope of log statistic(samples) against log x, with a bootstrap CI
    obtained by resampling seeds independently within every x.
    """
    sets = [_samples(s) for s in sample_sets]
    values = np.array([statistic(s) for s in sets])
    if np.any(values <= 0):
        raise DomainError(f"{name}: statistic must be positive for a log-log fit")
    log_x = np.log(np.asarray(xs, dtype=float))
    estimate = fit_slope(log_x, np.log(values))

    resamples = resamples or Config.BOOTSTRAP_RESAMPLES
    draws = []
    for _ in range(resamples):
        boot = [statistic(s[rng.integers(0, s.size, size=s.size)]) for s in sets]
        if min(boot) > 0:
            draws.append(fit_slope(log_x, np.log(boot)))
    return Estimate(name, estimate, *percentile_interval(draws, level))


def ratio_estimate(numerator, denominator, statistic, rng, name="ratio", resamples=None, level=0.95):
    """statistic(numerator)/statistic(denominator) with a two-sample bootstrap CI."""
    num, den = _samples(numerator), _samples(denominator)
    estimate = statistic(num) / statistic(den)
    resamples = resamples or Config.BOOTSTRAP_RESAMPLES
    draws = np.array([
        statistic(num[rng.integers(0, num.size, size=num.size)])
        / statistic(den[rng.integers(0, den.size, size=den.size)])
        for _ in range(resamples)
    ])
    return Estimate(name, float(estimate), *percentile_interval(draws, level))


def exponential_rate(times, means):
    """Decay rate r of means ≈ c·e^{−r t}, fitted on the positive entries."""
    times, means = np.asarray(times, dtype=float), np.asarray(means, dtype=float)
    keep = means > 0
    if np.sum(keep) < 2:
        raise DomainError("fewer than two positive means to fit a decay rate")
    return -fit_slope(times[keep], np.log(means[keep]))
