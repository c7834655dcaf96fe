import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from exceptions import DomainError
from stats import (
    Estimate,
    exponential_rate,
    fit_slope,
    loglog_slope,
    mean_and_se,
    percentile_interval,
    ratio_estimate,
)


def test_mean_and_se():
    mean, se = mean_and_se(np.array([1.0, 2.0, 3.0, 4.0]))
    assert mean == pytest.approx(2.5)
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)


def test_mean_and_se_along_axis():
    values = np.arange(12.0).reshape(4, 3)
    mean, se = mean_and_se(values, axis=0)
    assert_allclose(mean, [4.5, 5.5, 6.5])
    assert se.shape == (3,)


def test_single_seed_has_no_standard_error():
    with pytest.raises(DomainError):
        mean_and_se(np.array([1.0]))


def test_percentile_interval():
    low, high = percentile_interval(np.arange(101.0), level=0.9)
    assert (low, high) == pytest.approx((5.0, 95.0))
    assert all(math.isnan(v) for v in percentile_interval([]))


def test_non_finite_samples_are_dropped(rng):
    fit = ratio_estimate([2.0, math.nan, 2.0, 2.0], [1.0, 1.0, math.inf], np.mean, rng, resamples=50)
    assert (fit.estimate, fit.low, fit.high) == pytest.approx((2.0, 2.0, 2.0))


def test_fit_slope():
    assert fit_slope([0.0, 1.0, 2.0], [1.0, 3.0, 5.0]) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        fit_slope([1.0], [1.0])


def test_loglog_slope_recovers_power_law(rng):
    xs = [1.0, 2.0, 4.0, 8.0]
    sets = [x**2 * rng.uniform(0.9, 1.1, size=100) for x in xs]
    fit = loglog_slope(xs, sets, np.mean, rng, name="power", resamples=300)
    assert fit.name == "power"
    assert fit.estimate == pytest.approx(2.0, abs=0.05)
    assert fit.contains(fit.estimate)
    assert fit.low < fit.high


def test_loglog_slope_needs_positive_statistic(rng):
    with pytest.raises(DomainError):
        loglog_slope([1.0, 2.0], [np.array([-1.0, -2.0]), np.array([1.0, 2.0])], np.mean, rng)


def test_ratio_estimate(rng):
    num = rng.normal(2.0, 0.1, size=400)
    den = rng.normal(1.0, 0.05, size=400)
    fit = ratio_estimate(num, den, np.mean, rng, resamples=400, level=0.997)
    assert fit.estimate == pytest.approx(2.0, abs=0.03)
    assert fit.contains(2.0)


def test_exponential_rate():
    times = np.linspace(0.0, 1.0, 11)
    assert exponential_rate(times, 4.0 * np.exp(-3.0 * times)) == pytest.approx(3.0)
    with pytest.raises(DomainError):
        exponential_rate(times, -np.ones(11))


def test_estimate_contains():
    estimate = Estimate("x", 1.0, 0.5, 1.5)
    assert estimate.contains(1.5)
    assert not estimate.contains(1.6)
