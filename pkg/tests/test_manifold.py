import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import brentq

from config import Config
from exceptions import DomainError, OffManifoldError, RankAmbiguityError
from manifold import (
    NULL_MARKER,
    gf_project,
    gf_project_batch,
    hat_psi,
    make_frame,
    psi_matrix,
    psi_matrix_kron,
    second_diff_phi,
    sharpness_values,
    v_h,
)
from models import BlockQuadratic, eval_grad, third_contract
from numerics import big_f, psi


def valley_floor_height(x0, y0):
    """Along the valley flow ln y + y²/2 − x²/2 is conserved."""
    level = math.log(y0) + 0.5 * y0**2 - 0.5 * x0**2
    return brentq(lambda y: math.log(y) + 0.5 * y**2 - level, 1e-6, y0)


@pytest.fixture
def correlated_block():
    a = np.random.default_rng(6).standard_normal((4, 4))
    return BlockQuadratic([1.0, 2.0], 4, covariance=a @ a.T / 4 + 0.1 * np.eye(4))


class TestProjection:
    def test_valley_projection_matches_conserved_quantity(self, valley):
        phi = gf_project(valley, np.array([0.5, 1.0]))
        assert abs(phi[0]) < 1e-9
        assert abs(phi[1] - valley_floor_height(0.5, 1.0)) < 1e-8

    def test_block_projection_drops_normal_block(self, block):
        theta = np.array([0.3, -0.2, 1.5, -0.7])
        assert_allclose(gf_project(block, theta), [0.0, 0.0, 1.5, -0.7], atol=1e-9)

    def test_idempotent(self, valley):
        phi = gf_project(valley, np.array([0.8, -1.3]))
        assert np.linalg.norm(gf_project(valley, phi) - phi) <= max(2 * Config.PROJECTION_TOL, 1e-9)

    def test_points_on_manifold_are_fixed(self, valley):
        point = np.array([0.0, 2.5])
        assert np.array_equal(gf_project(valley, point), point)

    def test_batch_flags_invalid_rows(self, valley):
        points, valid = gf_project_batch(valley, np.array([[0.5, 1.0], [np.nan, 0.0], [0.0, -1.0]]))
        assert valid.tolist() == [True, False, True]
        assert np.all(np.isnan(points[1]))

    def test_null_marker(self, valley):
        assert gf_project(valley, np.array([np.inf, 0.0])) is NULL_MARKER
        assert not NULL_MARKER


class TestFrame:
    def test_valley_quantities(self, valley_frame):
        f = valley_frame
        assert f.rank == 1
        assert_allclose(f.hessian, np.diag([2.0, 0.0]))
        assert_allclose(f.p_par, np.diag([0.0, 1.0]), atol=1e-15)
        assert_allclose(f.hess_pinv, np.diag([0.5, 0.0]))
        assert_allclose(np.abs(f.tangent_basis[:, 0]), [0.0, 1.0])
        assert_allclose(f.sigma_par, np.diag([0.0, 1.0]), atol=1e-15)
        assert_allclose(f.sigma_diamond, np.diag([1.0, 0.0]), atol=1e-15)
        assert_allclose(f.sigma_par_sqrt, np.diag([0.0, 1.0]), atol=1e-12)
        assert_allclose(f.hat_sigma_diamond, np.diag([0.25, 0.0]), atol=1e-15)
        assert_allclose(f.hat_psi, np.diag([psi(2.0) / 4.0, 0.0]), atol=1e-15)
        assert_allclose(f.psi_mat, np.diag([psi(2.0), 0.0]), atol=1e-15)

    def test_projectors_are_complementary(self, softmax):
        frame = make_frame(softmax, softmax.find_interpolating_point())
        assert_allclose(frame.p_par @ frame.p_par, frame.p_par, atol=1e-10)
        assert_allclose(frame.p_par + frame.p_perp, np.eye(softmax.dim), atol=1e-12)
        assert_allclose(frame.hessian @ frame.p_par, 0.0, atol=1e-7)
        assert frame.tangent_basis.shape[1] == softmax.dim - frame.rank

    def test_rejects_off_manifold_point(self, valley):
        with pytest.raises(OffManifoldError):
            make_frame(valley, np.array([0.1, 1.0]))

    def test_rejects_negative_eta_h(self, valley):
        with pytest.raises(DomainError):
            make_frame(valley, np.array([0.0, 1.0]), eta_h=-1.0)

    def test_rank_ambiguity(self):
        model = BlockQuadratic([1.0, 1e-8], 3)
        with pytest.raises(RankAmbiguityError):
            make_frame(model, np.zeros(3))


class TestOperators:
    def test_v_h_solves_lyapunov_equation(self, correlated_block):
        frame = make_frame(correlated_block, np.zeros(4))
        m = frame.sigma
        v = v_h(frame, m)
        h = frame.hessian
        assert_allclose(h @ v + v @ h, m - frame.p_par @ m @ frame.p_par, atol=1e-12)

    def test_kronecker_sum_matches_eigen_weights(self, correlated_block):
        frame = make_frame(correlated_block, np.zeros(4), eta_h=0.7)
        assert_allclose(psi_matrix_kron(frame), psi_matrix(frame), atol=1e-10)
        assert_allclose(psi_matrix_kron(frame, 3.0), psi_matrix(frame, 3.0), atol=1e-10)

    def test_hat_psi_limits(self, valley_frame):
        assert_allclose(hat_psi(valley_frame, 0.0), 0.0, atol=1e-15)
        assert_allclose(hat_psi(valley_frame, 1e7), valley_frame.hat_sigma_diamond, atol=1e-7)

    def test_sharpness_values(self, valley_frame):
        values = sharpness_values(None, valley_frame)
        assert values.tr_hess == pytest.approx(2.0)
        assert values.tr_f_term == pytest.approx(big_f(2.0))
        assert sharpness_values(None, valley_frame, 0.0).tr_f_term == 0.0


class TestSecondDifferential:
    def test_valley_normal_direction(self, valley, valley_frame):
        out = second_diff_phi(valley, valley_frame, np.diag([1.0, 0.0]))
        assert_allclose(out, [0.0, -0.5], atol=1e-12)

    def test_valley_tangent_direction(self, valley, valley_frame):
        assert_allclose(second_diff_phi(valley, valley_frame, np.diag([0.0, 1.0])), 0.0, atol=1e-12)

    @pytest.mark.parametrize("direction", [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    def test_matches_finite_differences(self, valley, valley_frame, direction):
        v = np.array(direction)
        zeta, h = valley_frame.zeta, 1e-2
        plus, minus = gf_project(valley, zeta + h * v), gf_project(valley, zeta - h * v)
        second = (plus + minus - 2 * zeta) / h**2
        first = (plus - minus) / (2 * h)
        assert_allclose(second, second_diff_phi(valley, valley_frame, np.outer(v, v)), atol=1e-3)
        assert_allclose(first, valley_frame.p_par @ v, atol=1e-3)

    def test_drift_on_hessian_aligned_valley(self, aligned_valley):
        frame = make_frame(aligned_valley, np.array([0.0, 1.3]))
        assert_allclose(frame.sigma_par, 0.0, atol=1e-12)
        assert_allclose(frame.hat_sigma_diamond, 0.5 * frame.p_perp, atol=1e-12)
        grad = eval_grad(aligned_valley, frame.zeta)
        assert np.linalg.norm(grad) == 0.0
        lhs = frame.p_par @ third_contract(aligned_valley, frame.zeta, frame.hat_sigma_diamond)
        rhs = 0.5 * frame.p_par @ third_contract(aligned_valley, frame.zeta, np.eye(2))
        assert_allclose(lhs, rhs, atol=1e-12)
