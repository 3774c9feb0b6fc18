"""Acceptance criteria 1 to 9, each run at its stated tolerance.

Every test records one ``ACCEPTANCE <n> PASS|FAIL`` line, printed in the
terminal summary whatever the outcome.
"""

import json
import math
import time

import numpy as np
import pytest

import conftest
from oracles import enumerate_box_qp, feasible_box_qp, lasso_prox_oracle, random_psd, simplex_l1_oracle, symmetric_fd
from oracles import central_fd, small_window
from penmvo.backtest import (
    ExperimentConfig,
    MarketData,
    aggregate_report,
    prepare_trial,
    run_experiment,
    run_trial_models,
    sign_test,
    solve_frozen,
    synthetic_fixture,
)
from penmvo.cli import main as cli_main
from penmvo.errors import FactorizationError
from penmvo.l1_dual import L1PenalizedProblem, duality_gap, solve_l1_qp
from penmvo.penalty import PenaltyKind, PenaltyParams, init_params
from penmvo.qp_core import AdmmSettings, QpProblem, admm_solve
from penmvo.qp_grad import admm_fixed_point_backward, kkt_backward_box
from penmvo.trainer import DecisionCost, FeasibleSet, TrainConfig, grad_check, train

TIGHT = AdmmSettings(eps_abs=1e-11, eps_rel=1e-11, max_iter=100000)
FD_FORWARD = AdmmSettings(eps_abs=1e-10, eps_rel=1e-10, max_iter=50000)
LOFI = FeasibleSet.LONG_ONLY_FULLY_INVESTED
MV = DecisionCost()
PARAMETERIZED = (PenaltyKind.L2_P, PenaltyKind.L2_COV_P, PenaltyKind.L1_P, PenaltyKind.ELASTIC_NET_P)


def record(n: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n} {'PASS' if passed else 'FAIL'}: {detail}"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)


def block_rel_error(analytic, fd) -> float:
    """Normwise relative error of one gradient block."""
    a, f = np.asarray(analytic, float).ravel(), np.asarray(fd, float).ravel()
    return float(np.max(np.abs(a - f), initial=0.0) / max(np.max(np.abs(f), initial=0.0), 1e-8))


# ---------------------------------------------------------------------------- 1


def test_solver_matches_enumeration_oracle():
    rng = np.random.default_rng(2024)
    worst, solve_time = 0.0, 0.0
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 11))
        m = int(rng.integers(0, min(n - 1, 3) + 1))
        Q, p, A, b, lo, hi = feasible_box_qp(rng, n, m)
        t0 = time.perf_counter()
        z = admm_solve(QpProblem.create(Q, p, A, b, lo, hi)).z_star
        solve_time += time.perf_counter() - t0
        ref, _ = enumerate_box_qp(Q, p, A, b, lo, hi)
        worst = max(worst, float(np.max(np.abs(z - ref))))
    total = time.perf_counter() - start
    passed = worst <= 1e-5 and total < 30
    record(1, passed, f"max |dz|_inf = {worst:.2e} over 200 QPs (tol 1e-5); "
                      f"solver {solve_time:.1f} s, total {total:.1f} s (limit 30 s)")
    assert passed


# ---------------------------------------------------------------------------- 2


def _qp_block_errors(rng, mode):
    """(error, analytic, fd) of every input block for one random equality+box instance."""
    n = int(rng.integers(2, 7))
    m = int(rng.integers(1, min(n - 1, 2) + 1))
    Q, p, A, b, lo, hi = feasible_box_qp(rng, n, m)
    prob = QpProblem.create(Q, p, A, b, lo, hi)
    sol = admm_solve(prob, FD_FORWARD)
    w = rng.normal(size=n)
    if mode == "kkt":
        g = kkt_backward_box(prob, sol, w)
    else:
        g = admm_fixed_point_backward(sol, prob, FD_FORWARD, w)

    def cost(Q_=Q, p_=p, A_=A, b_=b, lo_=lo, hi_=hi):
        return float(w @ admm_solve(QpProblem.create(Q_, p_, A_, b_, lo_, hi_), FD_FORWARD).z_star)

    pairs = {
        "Q": (g.grad_Q, symmetric_fd(lambda S: cost(Q_=S), Q)),
        "p": (g.grad_p, central_fd(lambda x: cost(p_=x), p)),
        "A": (g.grad_A, central_fd(lambda x: cost(A_=x), A)),
        "b": (g.grad_b, central_fd(lambda x: cost(b_=x), b)),
        "lower": (g.grad_lower, central_fd(lambda x: cost(lo_=x), lo)),
        "upper": (g.grad_upper, central_fd(lambda x: cost(hi_=x), hi)),
    }
    return {k: (block_rel_error(a, f), a, f) for k, (a, f) in pairs.items()}


def test_gradient_certification():
    start = time.perf_counter()
    worst: dict = {}
    counts: dict = {}
    # largest |analytic| and |fd| over the entries that miss the tolerance
    miss_a, miss_fd, misses = 0.0, 0.0, 0

    def note(key, e, a, f, entrywise):
        nonlocal miss_a, miss_fd, misses
        worst[key] = max(worst.get(key, 0.0), e)
        counts[key] = counts.get(key, 0) + 1
        if e <= 1e-4:
            return
        a, f = np.ravel(a), np.ravel(f)
        bad = np.abs(a - f) > 1e-4 * np.maximum(np.abs(f), 1e-8) if entrywise else np.ones(a.size, bool)
        misses += int(bad.sum())
        miss_a = max(miss_a, float(np.max(np.abs(a[bad]))))
        miss_fd = max(miss_fd, float(np.max(np.abs(f[bad]))))

    for mode in ("fixed-point", "kkt"):
        rng = np.random.default_rng(77 if mode == "kkt" else 76)
        done = 0
        while done < 20:
            try:
                errs = _qp_block_errors(rng, mode)
            except FactorizationError:
                # a bound active with a zero multiplier makes the KKT system singular
                continue
            done += 1
            for block, (e, a, f) in errs.items():
                note((mode, block), e, a, f, entrywise=False)

    for kind in PenaltyKind:
        for block in kind.trainable:
            for seed in range(20):
                win = small_window(seed=seed)
                r = np.random.default_rng(seed)
                params = init_params(kind, win.d, win.d_x, r)
                params = params.updated(gamma1_raw=float(r.uniform(-4, -1)), gamma2_raw=float(r.uniform(-4, -1)))
                e, a, f = grad_check(win.subset(np.arange(12)), kind, MV, LOFI, params, block, step=1e-5,
                                     settings=FD_FORWARD, return_arrays=True)
                note((kind.value, block[:-4]), e, a, f, entrywise=True)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    passed = not bad and min(counts.values()) >= 20 and elapsed < 300
    detail = (f"{len(worst)} blocks x >=20 instances, max rel error {max(worst.values()):.2e} "
              f"(tol 1e-4); {elapsed:.0f} s (limit 300 s)")
    if bad:
        detail += (f"; failing {sorted(bad)}; the {misses} offending entries have max |analytic| {miss_a:.1e} "
                   f"and max |fd| {miss_fd:.1e}")
    record(2, passed, detail)
    assert passed, bad


# ---------------------------------------------------------------------------- 3


def _simplex_problem(rng):
    d = int(rng.integers(2, 9))
    V, y = random_psd(rng, d), rng.normal(size=d)
    theta, kappa = rng.uniform(0, 1, size=d), float(rng.uniform(0.05, 1.0))
    prob = L1PenalizedProblem.create(V, y, np.diag(theta), kappa, np.ones((1, d)), [1.0], -np.eye(d), np.zeros(d))
    return prob, (V, y, theta, kappa)


def test_dual_route():
    rng = np.random.default_rng(303)
    # (a) soft threshold with V = E = I and no constraints
    soft = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 8))
        y, kappa = 3 * rng.normal(size=d), float(rng.uniform(0.01, 2.0))
        z = solve_l1_qp(L1PenalizedProblem.create(np.eye(d), y, np.eye(d), kappa)).z_star
        soft = max(soft, float(np.max(np.abs(z - np.sign(y) * np.maximum(np.abs(y) - kappa, 0.0)))))
    # (b) duality gap and (c) projected/proximal gradient oracle on constrained instances
    gap = prox = 0.0
    for _ in range(50):
        prob, args = _simplex_problem(rng)
        sol = solve_l1_qp(prob, TIGHT)
        gap = max(gap, abs(duality_gap(prob, sol)))
        prox = max(prox, float(np.max(np.abs(sol.z_star - simplex_l1_oracle(*args)))))
    # unconstrained general-E lasso instances also checked against the proximal oracle
    for _ in range(10):
        d = int(rng.integers(1, 8))
        V, y, kappa = random_psd(rng, d), rng.normal(size=d), float(rng.uniform(0.05, 1.0))
        z = solve_l1_qp(L1PenalizedProblem.create(V, y, np.eye(d), kappa), TIGHT).z_star
        prox = max(prox, float(np.max(np.abs(z - lasso_prox_oracle(V, y, kappa)))))
    # (d) kappa -> 0 against the primal route
    limit = 0.0
    for _ in range(20):
        prob, (V, y, theta, _) = _simplex_problem(rng)
        d = len(y)
        near = solve_l1_qp(L1PenalizedProblem.create(V, y, np.diag(theta), 1e-8, np.ones((1, d)), [1.0],
                                                     -np.eye(d), np.zeros(d)), TIGHT).z_star
        primal = admm_solve(QpProblem.create(V, -y, np.ones((1, d)), [1.0], np.zeros(d), np.full(d, np.inf)),
                            TIGHT).z_star
        limit = max(limit, float(np.max(np.abs(near - primal))))
    passed = soft <= 1e-8 and gap <= 1e-6 and prox <= 1e-5 and limit <= 1e-4
    record(3, passed, f"(a) soft threshold {soft:.1e} (1e-8); (b) gap {gap:.1e} (1e-6); "
                      f"(c) oracle {prox:.1e} (1e-5); (d) kappa->0 {limit:.1e} (1e-4)")
    assert passed


# ---------------------------------------------------------------------------- 4


def test_l1_monotone_in_kappa():
    rng = np.random.default_rng(404)
    worst_rise = 0.0
    grid = np.geomspace(1e-3, 3.0, 10)
    for i in range(20):
        d = int(rng.integers(2, 8))
        V, y = random_psd(rng, d), 2 * rng.normal(size=d)
        if i % 2:
            E, cons = rng.normal(size=(d, d)), {}
        else:
            E = np.diag(rng.uniform(0.1, 1.0, size=d))
            cons = dict(A=np.ones((1, d)), b=[1.0], G=-np.eye(d), h=np.zeros(d))
        norms = [np.sum(np.abs(E @ solve_l1_qp(L1PenalizedProblem.create(V, y, E, k, **cons), TIGHT).z_star))
                 for k in grid]
        worst_rise = max(worst_rise, float(np.max(np.diff(norms))))
    passed = worst_rise <= 1e-8
    record(4, passed, f"largest increase of |Ez|_1 along a 10-point grid, 20 instances: {worst_rise:.1e} (tol 1e-8)")
    assert passed


# ---------------------------------------------------------------------------- 5


def test_training_demo():
    data = synthetic_fixture()
    config = ExperimentConfig()
    setup = prepare_trial(data, config, 0)
    start = time.perf_counter()
    tcfg = TrainConfig(learning_rate=0.1, iterations=100, delta=config.train.delta, seed=setup.train_config.seed)
    _, trace = train(setup.train_window, PenaltyKind.ELASTIC_NET_P, MV, tcfg, LOFI)
    elapsed = time.perf_counter() - start
    vol = np.sqrt(trace.costs * 52)
    drop = 1 - vol[-1] / vol[0]
    passed = drop >= 0.05 and elapsed < 600
    record(5, passed, f"EN-P in-sample vol {100 * vol[0]:.2f}% -> {100 * vol[-1]:.2f}% "
                      f"({100 * drop:.1f}% relative, need >= 5%); {elapsed:.0f} s (limit 600 s)")
    assert passed


# ---------------------------------------------------------------------------- 6


def test_experiment_analogue():
    data = synthetic_fixture()
    config = ExperimentConfig(kinds=(PenaltyKind.NOMINAL,) + PARAMETERIZED)
    start = time.perf_counter()
    results = run_experiment(data, config)
    elapsed = time.perf_counter() - start
    report = aggregate_report([{"trial": r.trial, "model": r.kind.value, **r.metrics} for r in results])
    nominal = np.array([r.metrics["vol"] ** 2 for r in results if r.kind is PenaltyKind.NOMINAL])
    parts, passed = [], True
    for kind in PARAMETERIZED:
        var = np.array([r.metrics["vol"] ** 2 for r in results if r.kind is kind])
        st = sign_test(var, nominal)
        assert st == report.sign_tests[kind.value]
        lower_mean = var.mean() < nominal.mean()
        ok = lower_mean and st["p_value"] < 0.05
        passed &= ok
        pct = 100 * report.percent_vs_nominal[kind.value]["variance"]["mean"]
        parts.append(f"{kind.value} {pct:+.1f}% var, {st['wins']}/{st['trials']} wins, p={st['p_value']:.3g}")
    record(6, passed, "; ".join(parts) + f" ({elapsed / 60:.0f} min)")
    assert passed


# ---------------------------------------------------------------------------- 7


def test_protocol_fidelity():
    data = synthetic_fixture()
    config = ExperimentConfig()
    setup = prepare_trial(data, config, 0)
    win = setup.test_window
    d = win.d
    ones = np.ones(d)
    rng = np.random.default_rng(7)
    worst = 0.0
    pairs = [(PenaltyKind.L1_P, PenaltyKind.L1), (PenaltyKind.L2_P, PenaltyKind.L2),
             (PenaltyKind.ELASTIC_NET_P, PenaltyKind.ELASTIC_NET)]
    for para, user in pairs:
        g1, g2 = rng.uniform(-6, -2, size=2)
        fixed = PenaltyParams(g1, g2, ones if para.trains_theta1 else None, ones if para.trains_theta2 else None,
                              para.default_alpha)
        plain = PenaltyParams(g1, g2, None, None, user.default_alpha)
        za = solve_frozen(win, para, fixed, config).z
        zb = solve_frozen(win, user, plain, config).z
        worst = max(worst, float(np.max(np.abs(za - zb))))
    # nominal against an independent projected-gradient solve of the unpenalized program
    nominal = solve_frozen(win, PenaltyKind.NOMINAL, init_params(PenaltyKind.NOMINAL, d), config).z
    V = config.train.delta * win.V_hat
    nom_err = 0.0
    for i in range(win.m):
        s = np.trace(V[i]) / d
        ref = simplex_l1_oracle(V[i] / s, np.zeros(d), np.zeros(d), 0.0, tol=1e-14)
        nom_err = max(nom_err, float(np.max(np.abs(nominal[i] - ref))))
    passed = worst <= 1e-8 and nom_err <= 1e-6
    record(7, passed, f"theta=1 P kinds vs L1/L2/EN max {worst:.1e} (tol 1e-8) over {win.m} rebalances; "
                      f"nominal vs unpenalized oracle {nom_err:.1e} (solver tolerance 1e-6)")
    assert passed


# ---------------------------------------------------------------------------- 8


def test_backtest_determinism(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[data]\nsynthetic = true\n[experiment]\ntrials = 3\nkinds = nominal,en-p,l2-p\n"
                   "[train]\niterations = 5\n")
    codes = [cli_main(["backtest", "--config", str(ini), "--seed", "7", "--output-dir", str(tmp_path / name)])
             for name in ("a", "b")]
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("metrics.csv", "summary.json")}
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    passed = codes == [0, 0] and all(same.values()) and summary["seed"] == 7
    record(8, passed, f"two backtest runs: metrics.csv identical={same['metrics.csv']}, "
                      f"summary.json identical={same['summary.json']}")
    assert passed


# ---------------------------------------------------------------------------- 9


def test_no_look_ahead():
    data = synthetic_fixture()
    config = ExperimentConfig(kinds=(PenaltyKind.NOMINAL,) + PARAMETERIZED, train=TrainConfig(iterations=5, delta=20.0))
    base = run_trial_models(data, config, 0)
    test_rows = np.searchsorted(data.dates, base[0].dates)
    checked, ok = 0, True
    for k in (0, 57, 150, len(test_rows) - 2):
        row = test_rows[k]
        returns, features = data.returns.copy(), data.features.copy()
        returns[row] += 0.25
        features[row] *= 4.0
        bumped = run_trial_models(MarketData(data.dates, returns, features, data.labels), config, 0)
        for a, b in zip(base, bumped):
            # weights through week k are fixed before week k's data exist; later weeks may react
            ok &= bool(np.array_equal(a.weights[: k + 1], b.weights[: k + 1]))
            ok &= not np.array_equal(a.weights[k + 1 :], b.weights[k + 1 :])
            checked += 1
    record(9, ok, f"{checked} (week, model) perturbations: weights through the perturbed week unchanged, later weeks respond")
    assert ok
