"""Numerics helpers checked against dense numpy references."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mslds.errors import NumericalError
from mslds.linalg import (
    chol_logdet,
    chol_lower,
    chol_solve,
    eigen_floor,
    golden_section_min,
    logsumexp,
    min_eig,
    spd_inverse,
    spectral_norm,
    symmetrize,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def square(draw_dim=st.integers(1, 6)):
    return draw_dim.flatmap(
        lambda d: hnp.arrays(np.float64, (d, d), elements=finite_floats)
    )


class TestSpectralNorm:
    @settings(max_examples=60, deadline=None)
    @given(square())
    def test_matches_dense_svd(self, m):
        assert spectral_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-6, abs=1e-9)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    def test_rank_one(self, rng):
        u = rng.standard_normal(4)
        v = rng.standard_normal(4)
        m = np.outer(u, v)
        expected = np.linalg.norm(u) * np.linalg.norm(v)
        assert spectral_norm(m) == pytest.approx(expected, rel=1e-8)

    def test_negative_definite(self):
        m = -np.diag([5.0, 1.0, 0.5])
        assert spectral_norm(m) == pytest.approx(5.0, rel=1e-8)


class TestLogSumExp:
    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
    def test_matches_naive(self, a):
        assert logsumexp(a) == pytest.approx(np.log(np.sum(np.exp(a))), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(
        hnp.arrays(np.float64, 8, elements=st.floats(-5, 5)),
        st.floats(-1e4, 1e4),
    )
    def test_shift_identity(self, a, c):
        assert logsumexp(a + c) == pytest.approx(logsumexp(a) + c, rel=1e-12, abs=1e-9)

    def test_handles_large_values(self):
        a = np.array([1000.0, 1000.0])
        assert logsumexp(a) == pytest.approx(1000.0 + np.log(2.0))

    def test_handles_neg_inf(self):
        a = np.array([-np.inf, 0.0])
        assert logsumexp(a) == pytest.approx(0.0)
        assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf

    def test_axis(self):
        a = np.arange(6.0).reshape(2, 3)
        expected = np.log(np.exp(a).sum(axis=1))
        np.testing.assert_allclose(logsumexp(a, axis=1), expected, rtol=1e-12)


class TestCholesky:
    def test_solve_matches_dense(self, rng):
        for d in (1, 3, 6):
            m = rng.standard_normal((d, d))
            spd = m @ m.T + d * np.eye(d)
            b = rng.standard_normal((d, 2))
            chol = chol_lower(spd)
            np.testing.assert_allclose(chol_solve(chol, b), np.linalg.solve(spd, b), rtol=1e-9)

    def test_logdet_matches_slogdet(self, rng):
        m = rng.standard_normal((4, 4))
        spd = m @ m.T + 4 * np.eye(4)
        sign, logdet = np.linalg.slogdet(spd)
        assert sign == 1.0
        assert chol_logdet(chol_lower(spd)) == pytest.approx(logdet, rel=1e-12)

    def test_rejects_indefinite(self):
        with pytest.raises(NumericalError):
            chol_lower(np.diag([1.0, -1.0]))

    def test_spd_inverse(self, rng):
        m = rng.standard_normal((5, 5))
        spd = m @ m.T + 5 * np.eye(5)
        np.testing.assert_allclose(spd_inverse(spd), np.linalg.inv(spd), rtol=1e-8, atol=1e-12)


class TestEigenFloor:
    def test_floors_negative_eigenvalues(self):
        m = np.diag([2.0, -3.0])
        out = eigen_floor(m, 0.5)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out)), [0.5, 2.0], rtol=1e-12)

    def test_identity_on_safe_matrix(self, rng):
        m = rng.standard_normal((4, 4))
        spd = m @ m.T + 4 * np.eye(4)
        np.testing.assert_allclose(eigen_floor(spd, 1e-12), spd, rtol=1e-10)

    def test_min_eig(self):
        assert min_eig(np.diag([3.0, -2.0, 7.0])) == pytest.approx(-2.0)


class TestGoldenSection:
    def test_quadratic(self):
        x, v = golden_section_min(lambda t: (t - 0.3) ** 2 + 1.0, 0.0, 1.0, tol=1e-10)
        # Value-based search cannot localize a quadratic argmin beyond
        # sqrt(machine eps); the value itself converges quadratically.
        assert x == pytest.approx(0.3, abs=5e-8)
        assert v == pytest.approx(1.0, abs=1e-12)

    def test_vee_shape(self):
        x, _ = golden_section_min(lambda t: abs(t - 0.77), 0.0, 1.0, tol=1e-10)
        assert x == pytest.approx(0.77, abs=1e-8)

    def test_endpoint_minimum(self):
        x, v = golden_section_min(lambda t: t, 0.0, 1.0, tol=1e-10)
        assert x == pytest.approx(0.0, abs=1e-7)
        assert v <= 1e-7


def test_symmetrize_idempotent(rng):
    m = rng.standard_normal((5, 5))
    s = symmetrize(m)
    np.testing.assert_array_equal(s, s.T)
    np.testing.assert_array_equal(symmetrize(s), s)
