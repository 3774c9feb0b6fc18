import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import enumerate_box_qp, feasible_box_qp, random_psd
from penmvo.errors import DimensionError, FactorizationError, InvalidProblemError
from penmvo.qp_core import (
    AdmmSettings,
    QpProblem,
    admm_solve,
    admm_solve_batch,
    kkt_reference_solve,
    objective_value,
    project_box,
)

INF = np.inf
TIGHT = AdmmSettings(eps_abs=1e-10, eps_rel=1e-10)


class TestProjectBox:
    def test_clamp(self):
        out = project_box([2, -3, 0.5], [0, 0, 0], [1, 1, 1])
        np.testing.assert_array_equal(out, [1, 0, 0.5])

    def test_infinite_bounds_are_identity(self):
        np.testing.assert_array_equal(project_box([5.0], [-INF], [INF]), [5.0])

    def test_degenerate_box(self):
        out = project_box([0.3, 0.7], [0.3, 0.7], [0.3, 0.7])
        np.testing.assert_array_equal(out, [0.3, 0.7])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            project_box([1.0, 2.0], [0.0], [1.0])

    @given(
        arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)),
        arrays(np.float64, 6, elements=st.floats(-10, 0)),
        arrays(np.float64, 6, elements=st.floats(0, 10)),
    )
    def test_idempotent(self, x, lo, hi):
        once = project_box(x, lo, hi)
        np.testing.assert_array_equal(project_box(once, lo, hi), once)


class TestKktReference:
    def test_symmetric_split(self):
        z, eta = kkt_reference_solve(np.eye(2), [0, 0], [[1, 1]], [1])
        np.testing.assert_allclose(z, [0.5, 0.5])

    def test_closed_form(self):
        z, eta = kkt_reference_solve(np.eye(2), [-3, -1], [[1, 1]], [0])
        np.testing.assert_allclose(z, [1, -1])
        np.testing.assert_allclose(eta, [2])

    def test_unconstrained(self):
        z, eta = kkt_reference_solve(2 * np.eye(2), [-2, -4])
        np.testing.assert_allclose(z, [1, 2])
        assert eta.size == 0

    def test_singular(self):
        with pytest.raises(FactorizationError) as err:
            kkt_reference_solve(np.zeros((2, 2)), [1, 1], [[1, 1]], [1])
        assert err.value.block == "KKT"


class TestObjective:
    @pytest.mark.parametrize(
        "Q, p, z, expected",
        [
            (np.eye(2), [0, 0], [1, 1], 1.0),
            ([[2.0]], [-2.0], [1.0], -1.0),
            (np.zeros((2, 2)), [3, 4], [1, 1], 7.0),
        ],
    )
    def test_values(self, Q, p, z, expected):
        assert objective_value(QpProblem.create(Q, p), np.asarray(z, float)) == pytest.approx(expected)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            objective_value(QpProblem.create(np.eye(2), [0, 0]), np.ones(3))


class TestProblemValidation:
    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidProblemError):
            QpProblem.create([[1.0, 0.5], [0.0, 1.0]], [0, 0])

    def test_rejects_indefinite(self):
        with pytest.raises(InvalidProblemError):
            QpProblem.create([[1.0, 0.0], [0.0, -1.0]], [0, 0])

    def test_rejects_crossed_bounds(self):
        with pytest.raises(InvalidProblemError):
            QpProblem.create(np.eye(2), [0, 0], lower=[1, 0], upper=[0, 1])

    def test_rejects_rank_deficient_A(self):
        with pytest.raises(InvalidProblemError):
            QpProblem.create(np.eye(2), [0, 0], A=[[1, 1], [2, 2]], b=[1, 2])

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            AdmmSettings(rho=0.0)
        with pytest.raises(ValueError):
            AdmmSettings(eps_abs=-1.0)


class TestAdmm:
    def test_unconstrained(self):
        sol = admm_solve(QpProblem.create(np.eye(2), [-1, -2]))
        assert sol.converged
        np.testing.assert_allclose(sol.z_star, [1, 2], atol=1e-8)

    def test_separable_clamp(self):
        sol = admm_solve(QpProblem.create(2 * np.eye(2), [-2, -6], lower=[0, 0], upper=[1, 1]))
        np.testing.assert_allclose(sol.z_star, [1, 1], atol=1e-8)
        # upper bound active on the second coordinate: multiplier 6 - 2 = 4
        np.testing.assert_allclose(sol.lambda_plus, [0, 4], atol=1e-8)
        np.testing.assert_allclose(sol.lambda_minus, [0, 0], atol=1e-12)

    def test_matches_enumeration_oracle(self, rng):
        for trial in range(30):
            n = int(rng.integers(1, 9))
            m = int(rng.integers(0, min(n, 3) + 1))
            Q, p, A, b, lo, hi = feasible_box_qp(rng, n, m)
            expected, _ = enumerate_box_qp(Q, p, A, b, lo, hi)
            sol = admm_solve(QpProblem.create(Q, p, A, b, lo, hi))
            assert sol.converged
            np.testing.assert_allclose(sol.z_star, expected, atol=1e-5)

    def test_kkt_residuals_and_complementarity(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 9))
            Q, p, A, b, lo, hi = feasible_box_qp(rng, n, 1)
            prob = QpProblem.create(Q, p, A, b, lo, hi)
            sol = admm_solve(prob, AdmmSettings(eps_abs=1e-8))
            assert sol.kkt_residual(prob) <= 1e-5
            assert np.all(sol.lambda_minus >= 0) and np.all(sol.lambda_plus >= 0)
            assert np.all(sol.lambda_minus * (sol.z_star - lo) <= 1e-5)
            assert np.all(sol.lambda_plus * (hi - sol.z_star) <= 1e-5)
            assert np.all(sol.z_star >= lo - 1e-9) and np.all(sol.z_star <= hi + 1e-9)
            assert np.max(np.abs(A @ sol.z_star - b)) <= 10 * 1e-8

    def test_lambda_definition(self, rng):
        Q, p, A, b, lo, hi = feasible_box_qp(rng, 6, 1)
        sol = admm_solve(QpProblem.create(Q, p, A, b, lo, hi))
        np.testing.assert_array_equal(sol.lambda_minus, -np.minimum(sol.rho * sol.mu_star, 0))
        np.testing.assert_array_equal(sol.lambda_plus, np.maximum(sol.rho * sol.mu_star, 0))

    def test_warm_start_converges_immediately(self, rng):
        Q, p, A, b, lo, hi = feasible_box_qp(rng, 7, 2)
        prob = QpProblem.create(Q, p, A, b, lo, hi)
        first = admm_solve(prob)
        again = admm_solve(prob, warm_start=first)
        assert again.iterations <= 2
        np.testing.assert_allclose(again.z_star, first.z_star, atol=1e-10)

    def test_warm_start_without_polish(self, rng):
        Q, p, A, b, lo, hi = feasible_box_qp(rng, 7, 2)
        prob = QpProblem.create(Q, p, A, b, lo, hi)
        raw = AdmmSettings(polish=False)
        first = admm_solve(prob, raw)
        assert admm_solve(prob, raw, warm_start=first).iterations <= 2

    def test_agrees_with_reference_when_unbounded(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 8))
            Q = random_psd(rng, n)
            p = rng.normal(size=n)
            A = rng.normal(size=(2, n))
            b = rng.normal(size=2)
            z_ref, eta_ref = kkt_reference_solve(Q, p, A, b)
            sol = admm_solve(QpProblem.create(Q, p, A, b))
            np.testing.assert_allclose(sol.z_star, z_ref, atol=1e-6)
            np.testing.assert_allclose(sol.eta_star, eta_ref, atol=1e-6)

    def test_iteration_exhaustion_is_not_an_error(self, rng):
        Q, p, A, b, lo, hi = feasible_box_qp(rng, 8, 1)
        sol = admm_solve(QpProblem.create(Q, p, A, b, lo, hi), AdmmSettings(max_iter=2, polish=False))
        assert not sol.converged
        assert sol.iterations == 2

    def test_batch_matches_single(self, rng):
        problems = [QpProblem.create(*feasible_box_qp(rng, 5, 1)) for _ in range(4)]
        batch = admm_solve_batch(
            np.stack([pr.Q for pr in problems]),
            np.stack([pr.p for pr in problems]),
            np.stack([pr.A for pr in problems]),
            np.stack([pr.b for pr in problems]),
            np.stack([pr.lower for pr in problems]),
            np.stack([pr.upper for pr in problems]),
        )
        for i, pr in enumerate(problems):
            np.testing.assert_allclose(batch.z_star[i], admm_solve(pr).z_star, atol=1e-9)

    def test_polish_reaches_machine_precision(self, rng):
        Q, p, A, b, lo, hi = feasible_box_qp(rng, 8, 2)
        prob = QpProblem.create(Q, p, A, b, lo, hi)
        sol = admm_solve(prob, AdmmSettings(eps_abs=1e-6, eps_rel=1e-6))
        assert sol.polished
        assert sol.kkt_residual(prob) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_feasibility_property(self, seed):
        r = np.random.default_rng(seed)
        Q, p, A, b, lo, hi = feasible_box_qp(r, int(r.integers(1, 7)), 1)
        sol = admm_solve(QpProblem.create(Q, p, A, b, lo, hi))
        assert np.all(sol.z_star >= lo) and np.all(sol.z_star <= hi)
        assert np.max(np.abs(A @ sol.z_star - b)) <= 1e-7
