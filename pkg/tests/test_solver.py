"""Penalty, eigensolver, Frank-Wolfe loop, and the outer objective search.

Oracles: closed-form log-sum-exp identities, central finite differences for
gradients, dense eigendecompositions for the extreme-eigenvector and
max-eigenvalue-SDP checks, and hand-computable 2x2 programs for the outer
search.
"""

import math

import numpy as np
import pytest

from mslds.solver import (
    AffineConstraint,
    ConvexProblem,
    FWResult,
    LinearFunctional,
    MatrixFunctional,
    PenaltyFunction,
    SolverConfig,
    approx_ev,
    default_start,
    feasibility_search,
    frank_wolfe,
    penalty,
    penalty_bounds_check,
    penalty_gradient,
    penalty_sharpness,
    rescale,
)


def sym(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m + m.T) / 2.0


def random_problem(rng, n=6, n_ineq=3, n_eq=2, level="mixed"):
    """Random constraint set around a random symmetric X.

    level controls where the constraint values sit relative to zero:
    'feasible' targets values <= 0, 'boundary' values near zero, 'violating'
    clearly positive ones, 'mixed' a blend.
    """
    x = sym(rng, n)
    ineqs = []
    for _ in range(n_ineq):
        g = sym(rng, n)
        base = float(np.sum(g * x))
        if level == "feasible":
            val = -rng.uniform(0.5, 2.0)
        elif level == "boundary":
            val = rng.uniform(-1e-4, 1e-4)
        elif level == "violating":
            val = rng.uniform(0.5, 2.0)
        else:
            val = rng.uniform(-1.0, 1.0)
        ineqs.append(LinearFunctional(g, val - base))
    eqs = []
    for _ in range(n_eq):
        i, j = rng.integers(0, n, size=2)
        entries = ((int(min(i, j)), int(max(i, j)), float(rng.uniform(0.5, 2.0))),)
        raw = sum(c * x[a, b] for a, b, c in entries)
        if level == "feasible":
            target = raw
        elif level == "boundary":
            target = raw + rng.uniform(-1e-4, 1e-4)
        elif level == "violating":
            target = raw + rng.uniform(0.7, 1.5)
        else:
            target = raw + rng.uniform(-0.5, 0.5)
        eqs.append(AffineConstraint(entries=entries, target=float(target)))
    prob = ConvexProblem(
        dim=n, objective=None, ineq_constraints=tuple(ineqs),
        eq_constraints=tuple(eqs), trace_bound=10.0,
    )
    return prob, x


class TestPenaltyValue:
    def test_single_constant_constraint_is_exact(self):
        c = 0.37
        prob = ConvexProblem(
            dim=2, objective=None,
            ineq_constraints=(LinearFunctional(np.zeros((2, 2)), c),),
            eq_constraints=(), trace_bound=1.0,
        )
        x = np.zeros((2, 2))
        assert penalty(prob, 50.0, x) == pytest.approx(c, abs=1e-14)

    def test_two_equal_terms_add_log2_over_m(self):
        c = -0.2
        m_sharp = 37.0
        prob = ConvexProblem(
            dim=2, objective=None,
            ineq_constraints=(
                LinearFunctional(np.zeros((2, 2)), c),
                LinearFunctional(np.zeros((2, 2)), c),
            ),
            eq_constraints=(), trace_bound=1.0,
        )
        got = penalty(prob, m_sharp, np.zeros((2, 2)))
        assert got == pytest.approx(c + math.log(2.0) / m_sharp, abs=1e-14)

    def test_empty_constraints_rejected(self):
        prob = ConvexProblem(
            dim=2, objective=None, ineq_constraints=(), eq_constraints=(),
            trace_bound=1.0,
        )
        with pytest.raises(ValueError):
            penalty(prob, 10.0, np.zeros((2, 2)))

    def test_overflow_safe_for_large_violations(self):
        g = np.eye(3)
        prob = ConvexProblem(
            dim=3, objective=None,
            ineq_constraints=(LinearFunctional(g, 0.0),),
            eq_constraints=(), trace_bound=10.0,
        )
        val = penalty(prob, 1e4, 50.0 * np.eye(3))  # f = 150, M f = 1.5e6
        assert val == pytest.approx(150.0, rel=1e-12)


class TestPenaltyGradient:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        prob, x = random_problem(rng, n=6, n_ineq=3, n_eq=2, level="mixed")
        m_sharp = 17.0
        grad = penalty_gradient(prob, m_sharp, x)
        h = 1e-5
        for i in range(6):
            for j in range(i, 6):
                d = np.zeros((6, 6))
                d[i, j] = 1.0
                d[j, i] = 1.0
                fd = (penalty(prob, m_sharp, x + h * d) - penalty(prob, m_sharp, x - h * d)) / (2 * h)
                an = float(np.sum(grad * d))
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_gradient_is_symmetric(self):
        rng = np.random.default_rng(3)
        prob, x = random_problem(rng)
        g = penalty_gradient(prob, 11.0, x)
        np.testing.assert_allclose(g, g.T, atol=1e-14)


class TestPenaltyBounds:
    def test_all_zero_constraints_give_exact_eps(self):
        # Every term contributes exp(0); Phi = log(n+m)/M = eps by design.
        n = 3
        prob = ConvexProblem(
            dim=n, objective=None,
            ineq_constraints=(
                LinearFunctional(np.zeros((n, n)), 0.0),
                LinearFunctional(np.zeros((n, n)), 0.0),
            ),
            eq_constraints=(AffineConstraint(((0, 0, 1.0),), target=0.0),),
            trace_bound=5.0,
        )
        eps = 1e-2
        x = np.zeros((n, n))
        phi, viol = penalty_bounds_check(prob, eps, x)
        assert viol == 0.0
        assert phi == pytest.approx(eps, rel=1e-12)

    def test_single_violation_bounds_phi_below(self):
        eps = 1e-2
        prob = ConvexProblem(
            dim=2, objective=None,
            ineq_constraints=(
                LinearFunctional(np.zeros((2, 2)), 2 * eps),
                LinearFunctional(np.zeros((2, 2)), -1.0),
            ),
            eq_constraints=(), trace_bound=1.0,
        )
        phi, viol = penalty_bounds_check(prob, eps, np.zeros((2, 2)))
        assert viol == pytest.approx(2 * eps)
        assert phi >= 2 * eps

    @pytest.mark.parametrize("level", ["feasible", "boundary", "violating", "mixed"])
    def test_sandwich_implications_hold(self, level):
        rng = np.random.default_rng(hash(level) % 2**32)
        for trial in range(50):
            n = int(rng.integers(2, 6))
            prob, x = random_problem(
                rng, n=n, n_ineq=int(rng.integers(1, 4)), n_eq=int(rng.integers(0, 3)),
                level=level,
            )
            eps = float(10.0 ** rng.uniform(-3, -1))
            phi, viol = penalty_bounds_check(prob, eps, x)
            if phi <= eps:
                assert viol <= eps
            if viol <= eps:
                assert phi <= 2 * eps


class TestRescale:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        prob, _ = random_problem(rng, n=4)
        resc = rescale(prob)
        m = rng.standard_normal((4, 4))
        x = m @ m.T  # PSD, trace < bound w.h.p. after normalization
        x *= min(1.0, 0.9 * prob.trace_bound / np.trace(x))
        y = resc.embed(x)
        assert y.shape == (5, 5)
        np.testing.assert_allclose(resc.extract(y), x, atol=1e-15)
        assert np.trace(y) == pytest.approx(1.0, abs=1e-12)

    def test_zero_matrix_puts_all_trace_in_slack(self):
        rng = np.random.default_rng(1)
        prob, _ = random_problem(rng, n=3)
        resc = rescale(prob)
        y = resc.embed(np.zeros((3, 3)))
        np.testing.assert_allclose(y, np.diag([0.0, 0.0, 0.0, 1.0]))

    def test_full_trace_gives_zero_slack(self):
        rng = np.random.default_rng(2)
        prob, _ = random_problem(rng, n=3)
        resc = rescale(prob)
        x = np.eye(3) * (prob.trace_bound / 3.0)
        y = resc.embed(x)
        assert y[3, 3] == pytest.approx(0.0, abs=1e-12)

    def test_functional_values_preserved(self):
        rng = np.random.default_rng(3)
        prob, x = random_problem(rng, n=4)
        x = x @ x.T * 0.05
        resc = rescale(prob)
        y = resc.embed(x)
        for f, f_lift in zip(prob.ineq_constraints, resc.problem.ineq_constraints):
            assert f_lift.value(y) == pytest.approx(f.value(x), rel=1e-10, abs=1e-12)
        for e, e_lift in zip(prob.eq_constraints, resc.problem.eq_constraints):
            assert e_lift.value(y) == pytest.approx(e.value(x), rel=1e-10, abs=1e-12)


class TestApproxEv:
    def test_diagonal_top_eigenvector(self):
        cfg = SolverConfig()
        v = approx_ev(np.diag([3.0, 1.0, -2.0]), cfg)
        assert abs(abs(v[0]) - 1.0) < 1e-6
        assert np.linalg.norm(v[1:]) < 1e-5

    def test_zero_matrix_reproducible(self):
        cfg = SolverConfig()
        v1 = approx_ev(np.zeros((4, 4)), cfg)
        v2 = approx_ev(np.zeros((4, 4)), cfg)
        np.testing.assert_array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)

    def test_random_matches_dense(self):
        rng = np.random.default_rng(7)
        cfg = SolverConfig()
        for _ in range(10):
            s = sym(rng, 50)
            v = approx_ev(s, cfg)
            top = float(np.linalg.eigvalsh(s)[-1])
            assert float(v @ s @ v) == pytest.approx(top, abs=1e-6 * max(1, abs(top)))

    def test_negative_definite(self):
        cfg = SolverConfig()
        s = -np.diag([1.0, 2.0, 5.0])
        v = approx_ev(s, cfg)
        # top (least negative) eigenvalue is -1 at e1
        assert float(v @ s @ v) == pytest.approx(-1.0, abs=1e-6)


class _Constant(MatrixFunctional):
    def value(self, x):
        return 4.2

    def gradient(self, x):
        return np.zeros_like(x)


class TestFrankWolfe:
    def test_max_eigenvalue_sdp(self):
        c = np.diag([5.0, 1.0, 1.0])
        phi = LinearFunctional(-c, 0.0)
        cfg = SolverConfig(eps=1e-3, max_fw_steps=2000)
        res = frank_wolfe(phi, 3, cfg, gap_tol=1e-4)
        assert res.value == pytest.approx(-5.0, abs=1e-3)
        # solution concentrates on e1 e1^T
        assert res.x[0, 0] == pytest.approx(1.0, abs=1e-3)

    def test_constant_phi_keeps_start(self):
        cfg = SolverConfig()
        res = frank_wolfe(_Constant(), 3, cfg)
        np.testing.assert_allclose(res.x, default_start(3), atol=1e-15)
        assert res.gap <= cfg.eps / 10

    def test_monotone_values(self):
        rng = np.random.default_rng(5)
        c = sym(rng, 6) + 3 * np.eye(6)
        phi = LinearFunctional(-c, 0.0)
        seen = []
        cfg = SolverConfig(max_fw_steps=300, check_iterates=True)
        frank_wolfe(phi, 6, cfg, on_iterate=lambda k, val, gap, g: seen.append(val))
        diffs = np.diff(seen)
        assert np.all(diffs <= 1e-12)

    def test_iteration_cost_grows_with_accuracy(self):
        c = np.diag([4.0, 2.0, 1.0, 0.5, 0.1])
        phi = LinearFunctional(-c, 0.0)
        counts = []
        for eps in (1e-1, 1e-2, 1e-3):
            cfg = SolverConfig(eps=eps, max_fw_steps=100_000)
            res = frank_wolfe(phi, 5, cfg, gap_tol=eps)
            counts.append(res.steps)
        assert counts[0] <= counts[1] <= counts[2]

    def test_target_short_circuit(self):
        phi = LinearFunctional(np.eye(3), 0.0)  # value = trace = 1 everywhere
        cfg = SolverConfig()
        res = frank_wolfe(phi, 3, cfg, target=2.0)
        assert res.hit_target
        assert res.steps == 0


class TestFeasibilitySearch:
    @staticmethod
    def _simplex_problem():
        # minimize tr(diag(1,2) X) s.t. tr(X) = 1, X >= 0  ->  optimum 1.
        return ConvexProblem(
            dim=2,
            objective=LinearFunctional(np.diag([1.0, 2.0]), 0.0),
            ineq_constraints=(),
            eq_constraints=(
                AffineConstraint(((0, 0, 1.0), (1, 1, 1.0)), target=1.0),
            ),
            trace_bound=1.0,
        )

    def test_linear_objective_on_simplex(self):
        # Without a cleaning map the search follows the smoothed penalty,
        # whose equality certification is only |tr - 1| <= sqrt(eps); the
        # objective may undershoot the true optimum by about that much. The
        # solution direction, however, is exact: rescaling the returned
        # point to trace one must recover the optimum tightly.
        cfg = SolverConfig(eps=1e-3, max_fw_steps=400)
        res = feasibility_search(self._simplex_problem(), cfg)
        assert res.success
        trace = float(np.trace(res.x))
        assert abs(trace - 1.0) <= math.sqrt(cfg.eps) * 1.01
        assert res.objective <= 1.0 + 2 * cfg.eps
        assert res.objective >= 1.0 - math.sqrt(cfg.eps) * 2.0 - 2 * cfg.eps
        rescaled_obj = res.objective / trace
        assert rescaled_obj == pytest.approx(1.0, abs=2e-3)

    def test_simplex_with_exact_reproject(self):
        # A cleaning map that knows the feasible manifold (here: scale to
        # trace one) removes the sqrt(eps) equality window entirely.
        def reproject(x):
            tr = float(np.trace(x))
            return x / tr if tr > 0 else np.eye(2) / 2.0

        cfg = SolverConfig(eps=1e-3, max_fw_steps=400)
        res = feasibility_search(self._simplex_problem(), cfg, reproject=reproject)
        assert res.success
        assert float(np.trace(res.x)) == pytest.approx(1.0, abs=1e-12)
        assert res.objective == pytest.approx(1.0, abs=2e-3)

    def test_infeasible_returns_fail(self):
        prob = ConvexProblem(
            dim=2,
            objective=None,
            ineq_constraints=(LinearFunctional(-np.eye(2), 5.0),),  # tr(X) >= 5
            eq_constraints=(),
            trace_bound=1.0,
        )
        cfg = SolverConfig(eps=1e-3, max_fw_steps=300)
        res = feasibility_search(prob, cfg)
        assert not res.success

    def test_constant_objective_probe_count(self):
        # Every bound-tightening probe fails, so the step just halves from 1
        # to below eps: ceil(log2(1/eps)) probes, plus the initial feasibility
        # solve and the final polish.
        eps = 1e-3
        prob = ConvexProblem(
            dim=2,
            objective=LinearFunctional(np.zeros((2, 2)), 7.0),
            ineq_constraints=(LinearFunctional(np.zeros((2, 2)), -1.0),),
            eq_constraints=(),
            trace_bound=1.0,
        )
        cfg = SolverConfig(eps=eps, max_fw_steps=200)
        res = feasibility_search(prob, cfg)
        assert res.success
        assert res.objective == pytest.approx(7.0)
        expected_inner = math.ceil(math.log2(1.0 / eps))
        assert res.probes == expected_inner + 2

    def test_pure_feasibility_no_objective(self):
        prob = ConvexProblem(
            dim=3,
            objective=None,
            ineq_constraints=(LinearFunctional(np.eye(3), -0.5),),  # tr(X) <= 0.5
            eq_constraints=(),
            trace_bound=1.0,
        )
        cfg = SolverConfig(eps=1e-3)
        res = feasibility_search(prob, cfg)
        assert res.success
        assert float(np.trace(res.x)) <= 0.5 + 2 * cfg.eps
