import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.special import exp1

from config import Config
from exceptions import DomainError, NonConvergentFlowError, NonFiniteError
from numerics import StopRule, big_f, integrate_ode, matrix_fn, psi, sym_eig


def f_closed_form(x):
    """F(x) = x − Ein(x) with Ein(x) = E₁(x) + ln x + γ."""
    return x - (exp1(x) + math.log(x) + np.euler_gamma)


class TestPsi:
    def test_known_values(self):
        assert psi(0.0) == 0.0
        assert abs(psi(1.0) - math.exp(-1.0)) <= 1e-12
        assert abs(psi(4.0) - (math.exp(-4.0) + 3.0) / 4.0) <= 1e-12

    def test_small_argument_uses_series(self):
        assert_allclose(psi(1e-6), 0.5e-6 - 1e-12 / 6.0, rtol=1e-12)

    def test_continuous_across_series_cutoff(self):
        x = Config.PSI_SERIES_CUTOFF
        below = psi(x * (1 - 1e-9))
        exact = (math.expm1(-x) + x) / x
        assert abs(below - exact) <= 1e-10

    def test_array_input(self):
        values = psi(np.array([0.0, 1.0, 4.0]))
        assert values.shape == (3,)
        assert values[0] == 0.0

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            psi(-0.1)

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError):
            psi(float("nan"))

    @given(st.floats(0.0, 100.0), st.floats(0.0, 100.0))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert psi(lo) <= psi(hi) + 1e-15
        assert 0.0 <= psi(hi) < 1.0


class TestBigF:
    def test_zero(self):
        assert big_f(0.0) == 0.0

    @pytest.mark.parametrize("x", [0.1, 1.0, 5.0, 20.0, 50.0])
    def test_matches_exponential_integral(self, x):
        assert_allclose(big_f(x), f_closed_form(x), rtol=1e-9)

    @pytest.mark.parametrize("x", [0.1, 1.0, 5.0, 20.0])
    def test_derivative_is_psi(self, x):
        h = 1e-3
        assert abs((big_f(x + h) - big_f(x - h)) / (2 * h) - psi(x)) <= 1e-6

    def test_large_argument_ratio(self):
        assert 0.85 <= big_f(50.0) / 50.0 <= 1.0

    def test_vectorised(self):
        assert_allclose(big_f(np.array([0.0, 1.0])), [0.0, f_closed_form(1.0)], rtol=1e-9)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            big_f(-1.0)


symmetric = st.lists(st.floats(-10.0, 10.0), min_size=9, max_size=9).map(
    lambda v: np.array(v).reshape(3, 3) + np.array(v).reshape(3, 3).T
)


class TestSymEig:
    def test_diagonal(self):
        eig = sym_eig(np.diag([2.0, 0.0]))
        assert_allclose(eig.eigenvalues, [2.0, 0.0])
        assert_allclose(np.abs(eig.eigenvectors), np.eye(2))
        assert eig.rank == 1

    def test_descending(self):
        eig = sym_eig(np.diag([1.0, 3.0, 2.0]))
        assert list(eig.eigenvalues) == [3.0, 2.0, 1.0]

    def test_threshold_is_relative(self):
        eig = sym_eig(np.diag([1e6, 1e-3]))
        assert eig.rank_threshold == pytest.approx(1e-2)
        assert eig.rank == 1
        assert eig.thresholded[1] == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(DomainError):
            sym_eig(np.array([[1.0, 1.0], [0.0, 1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(symmetric)
    def test_reconstruction_and_orthonormality(self, m):
        eig = sym_eig(m)
        scale = max(1.0, np.linalg.norm(m))
        assert np.linalg.norm(eig.reconstruct() - m) <= 1e-8 * scale
        assert_allclose(eig.eigenvectors.T @ eig.eigenvectors, np.eye(3), atol=1e-10)
        assert np.all(np.diff(eig.eigenvalues) <= 0)

    def test_matrix_fn_identity_and_square_root(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        eig = sym_eig(m)
        assert_allclose(matrix_fn(eig, lambda lam: lam), m, atol=1e-12)
        root = matrix_fn(eig, math.sqrt)
        assert_allclose(root @ root, m, atol=1e-12)


class TestIntegrateOde:
    def test_exponential_decay(self):
        x = integrate_ode(lambda x: -x, np.array([1.0]), StopRule.fixed(1.0), 1e-12)
        assert_allclose(x, [math.exp(-1.0)], rtol=1e-9)

    def test_zero_horizon_returns_start(self):
        x0 = np.array([[1.0, 2.0]])
        assert_allclose(integrate_ode(lambda x: -x, x0, StopRule.fixed(0.0), 1e-10), x0)

    def test_stationary_stop(self):
        x = integrate_ode(lambda x: -x, np.array([1.0, -2.0]), StopRule.stationary(1e-9), 1e-10)
        assert np.linalg.norm(x) < 1e-9

    def test_shape_preserved(self):
        x0 = np.ones((3, 2))
        assert integrate_ode(lambda x: -2 * x, x0, StopRule.fixed(0.5), 1e-10).shape == (3, 2)

    def test_needs_a_stop_rule(self):
        with pytest.raises(DomainError):
            integrate_ode(lambda x: -x, np.array([1.0]), StopRule(), 1e-10)

    def test_flow_without_fixed_point(self):
        with pytest.raises(NonConvergentFlowError):
            integrate_ode(lambda x: np.ones_like(x), np.array([0.0]), StopRule.stationary(1e-9), 1e-8)
