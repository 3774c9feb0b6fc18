import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_fd
from penmvo.errors import InvalidProblemError
from penmvo.l1_dual import L1PenalizedProblem, solve_l1_qp
from penmvo.penalty import (
    PenaltyKind,
    PenaltyParams,
    PenaltyStructures,
    assemble_v_gamma2,
    build_structures,
    init_params,
    l2_penalty_backward,
    psd_sqrt,
    raw_gradients,
    transform_params,
)

ALL_KINDS = list(PenaltyKind)


class TestKind:
    @pytest.mark.parametrize(
        "name", ["nominal", "l2", "l2-cov", "l1", "en", "l2-p", "l2-cov-p", "l1-p", "en-p"]
    )
    def test_parse_roundtrip(self, name):
        assert PenaltyKind.parse(name).value == name

    def test_parse_unknown(self):
        with pytest.raises(ValueError, match="unknown penalty kind"):
            PenaltyKind.parse("lasso")

    @pytest.mark.parametrize(
        "kind, trainable",
        [
            (PenaltyKind.NOMINAL, ()),
            (PenaltyKind.L2, ("gamma2_raw",)),
            (PenaltyKind.L1, ("gamma1_raw",)),
            (PenaltyKind.ELASTIC_NET, ("gamma1_raw", "gamma2_raw")),
            (PenaltyKind.L1_P, ("gamma1_raw", "theta1_raw")),
            (PenaltyKind.ELASTIC_NET_P, ("gamma1_raw", "gamma2_raw", "theta1_raw", "theta2_raw")),
        ],
    )
    def test_trainable(self, kind, trainable):
        assert kind.trainable == trainable

    @pytest.mark.parametrize(
        "kind, alpha", [(PenaltyKind.L1, 1.0), (PenaltyKind.L2_P, 0.0), (PenaltyKind.ELASTIC_NET, 0.5)]
    )
    def test_default_alpha(self, kind, alpha):
        assert kind.default_alpha == alpha


class TestTransform:
    def test_gamma_init(self):
        g1, g2, _, _ = transform_params(PenaltyParams())
        assert g1 == pytest.approx(0.0183156, abs=1e-7)
        assert g2 == pytest.approx(np.exp(-4.0))

    @pytest.mark.parametrize("raw, expected", [(-0.5, 0.0), (0.7, 0.7), (0.0, 0.0)])
    def test_relu(self, raw, expected):
        _, _, th1, _ = transform_params(PenaltyParams(theta1_raw=np.array([raw])))
        assert th1[0] == expected

    @given(st.floats(-50, 50))
    def test_gamma_positive(self, raw):
        g1, g2, _, _ = transform_params(PenaltyParams(raw, raw))
        assert g1 > 0 and g2 > 0

    def test_init_theta_uniform(self):
        p = init_params(PenaltyKind.ELASTIC_NET_P, 20, rng=np.random.default_rng(3))
        assert p.theta1_raw.shape == (20,) and p.theta2_raw.shape == (20,)
        assert np.all((p.theta1_raw >= 0) & (p.theta1_raw <= 1))
        assert p.gamma1_raw == -4.0 and p.alpha == 0.5

    def test_init_cov_p_is_matrix(self):
        p = init_params(PenaltyKind.L2_COV_P, 7, d_x=3)
        assert p.theta2_raw.shape == (3, 7)

    def test_dict_roundtrip(self):
        p = init_params(PenaltyKind.ELASTIC_NET_P, 4)
        q = PenaltyParams.from_dict(p.to_dict())
        np.testing.assert_array_equal(q.theta1_raw, p.theta1_raw)
        assert q.alpha == p.alpha


class TestStructures:
    def test_l1p_diag(self):
        params = PenaltyParams(theta1_raw=np.array([0.5, -1.0, 2.0]), alpha=1.0)
        s = build_structures(PenaltyKind.L1_P, params, 3)
        np.testing.assert_array_equal(s.E, np.diag([0.5, 0.0, 2.0]))
        assert s.D is None

    def test_nominal(self):
        s = build_structures(PenaltyKind.NOMINAL, PenaltyParams(), 3)
        assert s.E is None and s.D is None and s.kappa == 0 and s.l2_weight == 0

    def test_l2_cov(self):
        s = build_structures(PenaltyKind.L2_COV, PenaltyParams(alpha=0.0), 2, np.eye(2), 0.5 * np.eye(2))
        np.testing.assert_array_equal(s.D, 0.5 * np.eye(2))

    def test_l2_cov_requires_context(self):
        with pytest.raises(InvalidProblemError):
            build_structures(PenaltyKind.L2_COV, PenaltyParams(alpha=0.0), 2)

    def test_weights(self):
        s = build_structures(PenaltyKind.ELASTIC_NET, PenaltyParams(0.0, np.log(2.0), alpha=0.5), 3)
        assert s.kappa == pytest.approx(0.5)
        assert s.l2_weight == pytest.approx(1.0)

    @pytest.mark.parametrize(
        "param_kind, user_kind",
        [
            (PenaltyKind.L1_P, PenaltyKind.L1),
            (PenaltyKind.L2_P, PenaltyKind.L2),
            (PenaltyKind.ELASTIC_NET_P, PenaltyKind.ELASTIC_NET),
        ],
    )
    def test_unit_theta_matches_user_defined(self, param_kind, user_kind, rng):
        d = 4
        params = init_params(param_kind, d)
        params = params.updated(
            theta1_raw=None if params.theta1_raw is None else np.ones(d),
            theta2_raw=None if params.theta2_raw is None else np.ones(d),
        )
        user = init_params(user_kind, d)
        a = build_structures(param_kind, params, d)
        b = build_structures(user_kind, user, d)
        for x, y in ((a.E, b.E), (a.D, b.D)):
            assert (x is None and y is None) or np.array_equal(x, y)
        V = np.eye(d) + 0.1
        y = rng.normal(size=d)
        za = _solve(V, y, a)
        zb = _solve(V, y, b)
        np.testing.assert_allclose(za, zb, atol=1e-8)


def _solve(V, y, s: PenaltyStructures):
    Vg = assemble_v_gamma2(V, 1.0, s)
    d = len(y)
    prob = L1PenalizedProblem.create(Vg, y, s.E, s.kappa, np.ones((1, d)), [1.0], -np.eye(d), np.zeros(d))
    return solve_l1_qp(prob).z_star


class TestAssemble:
    def test_ridge(self):
        s = PenaltyStructures(None, np.eye(2), 0.0, 1.0)
        np.testing.assert_allclose(assemble_v_gamma2(np.eye(2), 2.0, s), 3 * np.eye(2))

    def test_absent_D(self):
        V = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_array_equal(assemble_v_gamma2(V, 1.5, PenaltyStructures(None, None, 0, 0)), 1.5 * V)

    def test_scalar(self):
        s = build_structures(PenaltyKind.ELASTIC_NET, PenaltyParams(0.0, np.log(2.0), alpha=0.5), 1)
        s = PenaltyStructures(s.E, np.array([[2.0]]), s.kappa, s.l2_weight)
        np.testing.assert_allclose(assemble_v_gamma2(np.eye(1), 1.0, s), [[5.0]])

    def test_penalty_part_psd(self, rng):
        D = rng.normal(size=(3, 5))
        V = np.eye(5)
        out = assemble_v_gamma2(V, 1.0, PenaltyStructures(None, D, 0, 0.7))
        assert np.min(np.linalg.eigvalsh(out - V)) >= -1e-12

    def test_batch(self, rng):
        Vs = np.stack([np.eye(3) * (i + 1) for i in range(4)])
        out = assemble_v_gamma2(Vs, 2.0, PenaltyStructures(None, np.eye(3), 0, 1.0))
        assert out.shape == (4, 3, 3)
        np.testing.assert_allclose(out[2], 7 * np.eye(3))


class TestL2Backward:
    def test_identity(self):
        s = PenaltyStructures(None, np.eye(2), 0.0, 1.0)
        g2, gD = l2_penalty_backward(np.eye(2), s, 0.0, 1.0)
        assert g2 == pytest.approx(2.0)
        np.testing.assert_allclose(gD, 2 * np.eye(2))

    def test_alpha_one(self, rng):
        s = PenaltyStructures(None, rng.normal(size=(2, 2)), 0.0, 0.0)
        g2, gD = l2_penalty_backward(np.eye(2), s, 1.0, 1.0)
        assert g2 == 0.0 and np.all(gD == 0)

    def test_fd(self, rng):
        d = 4
        G = rng.normal(size=(d, d))
        G = G + G.T
        D = rng.normal(size=(3, d))
        alpha, gamma2 = 0.3, 1.7
        V = np.eye(d)

        def f(g2, D_):
            s = PenaltyStructures(None, D_, 0.0, (1 - alpha) * g2)
            return float(np.sum(G * assemble_v_gamma2(V, 1.0, s)))

        s = PenaltyStructures(None, D, 0.0, (1 - alpha) * gamma2)
        g2, gD = l2_penalty_backward(G, s, alpha, gamma2)
        assert g2 == pytest.approx(central_fd(lambda x: f(x[0], D), np.array([gamma2]))[0], rel=1e-7)
        np.testing.assert_allclose(gD, central_fd(lambda x: f(gamma2, x), D), rtol=1e-6, atol=1e-8)


class TestRawGradients:
    def test_cov_p_chain(self, rng):
        d_x, d = 2, 3
        W_sqrt = psd_sqrt(np.array([[1.0, 0.2], [0.2, 0.5]]))
        params = init_params(PenaltyKind.L2_COV_P, d, d_x=d_x, rng=rng)
        params = params.updated(gamma2_raw=0.1)
        G = rng.normal(size=(d, d))
        G = G + G.T

        def f(theta2):
            s = build_structures(PenaltyKind.L2_COV_P, params.updated(theta2_raw=theta2), d, W_sqrt=W_sqrt)
            return float(np.sum(G * assemble_v_gamma2(np.eye(d), 1.0, s)))

        s = build_structures(PenaltyKind.L2_COV_P, params, d, W_sqrt=W_sqrt)
        out = raw_gradients(PenaltyKind.L2_COV_P, params, s, G, W_sqrt=W_sqrt)
        np.testing.assert_allclose(out["theta2_raw"], central_fd(f, params.theta2_raw), rtol=1e-6, atol=1e-9)

    def test_gamma_chain(self, rng):
        params = init_params(PenaltyKind.ELASTIC_NET, 3).updated(gamma1_raw=0.2, gamma2_raw=-0.3)
        s = build_structures(PenaltyKind.ELASTIC_NET, params, 3)
        G = np.diag([1.0, 2.0, 3.0])
        out = raw_gradients(PenaltyKind.ELASTIC_NET, params, s, G, grad_kappa=2.0)
        assert out["gamma1_raw"] == pytest.approx(0.5 * 2.0 * np.exp(0.2))
        assert out["gamma2_raw"] == pytest.approx(0.5 * 6.0 * np.exp(-0.3))

    def test_dead_theta_has_zero_gradient(self):
        params = PenaltyParams(theta1_raw=np.array([-0.1, 0.0, 0.5]), alpha=1.0)
        s = build_structures(PenaltyKind.L1_P, params, 3)
        out = raw_gradients(PenaltyKind.L1_P, params, s, np.zeros((3, 3)), grad_E=np.eye(3), grad_kappa=0.0)
        np.testing.assert_array_equal(out["theta1_raw"], [0.0, 0.0, 1.0])


class TestPsdSqrt:
    def test_square(self, rng):
        L = rng.normal(size=(4, 4))
        W = L @ L.T
        R = psd_sqrt(W)
        np.testing.assert_allclose(R @ R, W, atol=1e-10)

    def test_rank_deficient(self):
        R = psd_sqrt(np.zeros((2, 2)))
        np.testing.assert_allclose(R, 1e-5 * np.eye(2))
