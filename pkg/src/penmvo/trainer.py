"""Penalized-MVO layer over a window of periods, decision costs and training.

Each period ``i`` solves

    min_z  -z'y_i + 1/2 z'V_i z + kappa ||E z||_1    over the feasible set,

with ``V_i = delta * V_hat_i + l2_weight * D'D``. Problems with an active L1
term go through the dual layer, the rest through the primal ADMM layer.
Every period is first divided by ``s_i = trace(V_i) / d``; the minimizer is
invariant to that joint rescaling of ``(V, y, kappa)``, so ``dz/ds = 0`` and
the gradients simply pick up a factor ``1 / s_i``.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateCostError, DimensionError, DivergenceError, SolverFailure
from .l1_dual import build_dual_batch, l1_backward_batch, solve_l1_batch
from .penalty import (
    PenaltyKind,
    PenaltyParams,
    PenaltyStructures,
    assemble_v_gamma2,
    build_structures,
    init_params,
    raw_gradients,
    transform_params,
)
from .qp_core import AdmmSettings, admm_solve_batch
from .qp_grad import _check_eps, fixed_point_backward_batch

__all__ = [
    "FeasibleSet",
    "CostKind",
    "DecisionCost",
    "TrainConfig",
    "TrainingWindow",
    "TraceRecord",
    "TrainTrace",
    "PeriodSolution",
    "Adam",
    "solve_periods",
    "periods_backward",
    "cost_value",
    "cost_gradient",
    "pipeline_value",
    "pipeline_gradient",
    "train",
    "grad_check",
    "KAPPA_ROUTE_THRESHOLD",
]

KAPPA_ROUTE_THRESHOLD = 1e-12
PERIODS_PER_YEAR = 52
BLOCKS = ("gamma1_raw", "gamma2_raw", "theta1_raw", "theta2_raw")


class FeasibleSet(Enum):
    LONG_ONLY_FULLY_INVESTED = "long-only"
    UNCONSTRAINED = "unconstrained"

    @classmethod
    def parse(cls, name: str) -> "FeasibleSet":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown constraint set {name!r}; expected long-only or unconstrained") from None


class CostKind(Enum):
    MIN_VARIANCE = "min-variance"
    SHARPE_RATIO = "sharpe"


@dataclass(frozen=True)
class DecisionCost:
    kind: CostKind = CostKind.MIN_VARIANCE
    risk_free: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.risk_free):
            raise ValueError("risk_free must be finite")

    @classmethod
    def parse(cls, name: str, risk_free: float = 0.0) -> "DecisionCost":
        try:
            return cls(CostKind(name.strip().lower()), risk_free)
        except ValueError:
            raise ValueError(f"unknown cost {name!r}; expected min-variance or sharpe") from None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    iterations: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    delta: float = 1.0
    batch_fraction: float = 1.0
    seed: int = 0
    tikhonov_eps: float = 1e-6
    admm: AdmmSettings = field(default_factory=AdmmSettings)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        _check_eps(self.tikhonov_eps)


@dataclass(frozen=True)
class TrainingWindow:
    """Per-period estimates and realized returns for one training window."""

    y_hat: np.ndarray  # (m, d)
    V_hat: np.ndarray  # (m, d, d)
    realized: np.ndarray  # (m, d)
    beta_hat: np.ndarray | None = None  # (d_x, d)
    W_sqrt: np.ndarray | None = None  # (d_x, d_x)

    def __post_init__(self):
        m, d = self.y_hat.shape
        if self.V_hat.shape != (m, d, d) or self.realized.shape != (m, d):
            raise DimensionError("window arrays disagree on periods or assets")

    @property
    def m(self) -> int:
        return self.y_hat.shape[0]

    @property
    def d(self) -> int:
        return self.y_hat.shape[1]

    @property
    def d_x(self) -> int | None:
        return None if self.W_sqrt is None else self.W_sqrt.shape[0]

    def subset(self, idx) -> "TrainingWindow":
        return TrainingWindow(self.y_hat[idx], self.V_hat[idx], self.realized[idx], self.beta_hat, self.W_sqrt)


# ---------------------------------------------------------------------------
# layer


def _constraints(feasible: FeasibleSet, d: int):
    if feasible is FeasibleSet.LONG_ONLY_FULLY_INVESTED:
        return np.ones((1, d)), np.ones(1)
    return None, None


@dataclass
class PeriodSolution:
    z: np.ndarray  # (m, d)
    route: str  # "primal" or "dual"
    scale: np.ndarray  # (m,)
    converged: np.ndarray
    state: dict


def solve_periods(
    V_gamma2: np.ndarray,
    y_hat: np.ndarray,
    structures: PenaltyStructures,
    feasible: FeasibleSet,
    settings: AdmmSettings | None = None,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
) -> PeriodSolution:
    """Solve every period's penalized problem; ``warm`` is a ``(z0, mu0)`` pair."""
    settings = settings or AdmmSettings()
    m, d = y_hat.shape
    scale = np.trace(V_gamma2, axis1=1, axis2=2) / d
    Vs = V_gamma2 / scale[:, None, None]
    ys = y_hat / scale[:, None]
    A, b = _constraints(feasible, d)
    if structures.E is not None and structures.kappa > KAPPA_ROUTE_THRESHOLD:
        G = h = None
        if feasible is FeasibleSet.LONG_ONLY_FULLY_INVESTED:
            G, h = -np.eye(d), np.zeros(d)
        dual = build_dual_batch(Vs, ys, structures.E, structures.kappa / scale, A, b, G, h)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sol = solve_l1_batch(dual, ys, settings, warm)
        if not np.all(np.isfinite(sol.z)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(sol.z), axis=1))[0])
            raise SolverFailure("dual solve produced non-finite weights", index=bad)
        return PeriodSolution(sol.z, "dual", scale, sol.admm.converged, {"dual": dual, "sol": sol})

    lower = upper = None
    if feasible is FeasibleSet.LONG_ONLY_FULLY_INVESTED:
        lower, upper = np.zeros(d), np.full(d, np.inf)
    z0 = mu0 = None
    if warm is not None and np.shape(warm[0]) == (m, d):
        z0, mu0 = warm
    sol = admm_solve_batch(Vs, -ys, A, b, lower, upper, settings, z0, mu0)
    if not np.all(np.isfinite(sol.z_star)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(sol.z_star), axis=1))[0])
        raise SolverFailure("primal solve produced non-finite weights", index=bad)
    state = {"sol": sol, "Q": Vs, "A": A, "lower": lower, "upper": upper}
    return PeriodSolution(sol.z_star.copy(), "primal", scale, sol.converged, state)


def warm_state(solution: PeriodSolution) -> tuple[np.ndarray, np.ndarray]:
    adm = solution.state["sol"].admm if solution.route == "dual" else solution.state["sol"]
    return adm.z_star, adm.mu_star


def periods_backward(solution: PeriodSolution, dc_dz: np.ndarray, tikhonov_eps: float = 1e-6):
    """Per-period gradients on ``V_gamma2`` (m, d, d), ``E`` (m, dE, d) and ``kappa`` (m,)."""
    inv_s = 1.0 / solution.scale
    if solution.route == "dual":
        out = l1_backward_batch(solution.state["dual"], solution.state["sol"], dc_dz, tikhonov_eps)
        return out["V"] * inv_s[:, None, None], out["E"], out["kappa"] * inv_s
    st = solution.state
    sol = st["sol"]
    lower = np.full(sol.z_star.shape[1], -np.inf) if st["lower"] is None else st["lower"]
    upper = np.full(sol.z_star.shape[1], np.inf) if st["upper"] is None else st["upper"]
    out = fixed_point_backward_batch(
        st["Q"], st["A"], sol.z_star, sol.mu_star, sol.eta_star, lower, upper, sol.rho, dc_dz, tikhonov_eps
    )
    return out["Q"] * inv_s[:, None, None], None, np.zeros(len(inv_s))


# ---------------------------------------------------------------------------
# decision costs


def _portfolio_returns(weights, returns):
    w = np.asarray(weights, dtype=float)
    y = np.asarray(returns, dtype=float)
    if w.shape != y.shape or w.ndim != 2:
        raise DimensionError(f"weights {w.shape} and returns {y.shape} must be matching (m, d) arrays")
    return w, y, np.einsum("ij,ij->i", w, y)


def _sharpe_parts(r, cost):
    m = r.size
    if m < 2:
        raise DegenerateCostError("the Sharpe-ratio cost needs at least two periods")
    mu = r.mean()
    sigma = math.sqrt(np.mean((r - mu) ** 2))
    if sigma == 0.0:
        raise DegenerateCostError("portfolio return series has zero variance")
    return m, mu, sigma


def cost_value(weights, returns, cost: DecisionCost) -> float:
    """Realized decision cost: population variance, or negative Sharpe ratio."""
    _, _, r = _portfolio_returns(weights, returns)
    if cost.kind is CostKind.MIN_VARIANCE:
        if r.size < 1:
            raise DegenerateCostError("no periods")
        return float(np.mean((r - r.mean()) ** 2))
    _, mu, sigma = _sharpe_parts(r, cost)
    return float(-(mu - cost.risk_free) / sigma)


def cost_gradient(weights, returns, cost: DecisionCost) -> np.ndarray:
    """Closed-form ``dc / dz_i`` for every period, shape (m, d)."""
    _, y, r = _portfolio_returns(weights, returns)
    m = r.size
    if cost.kind is CostKind.MIN_VARIANCE:
        dr = 2.0 / m * (r - r.mean())
    else:
        m, mu, sigma = _sharpe_parts(r, cost)
        dr = -1.0 / (m * sigma) + (mu - cost.risk_free) * (r - mu) / (m * sigma**3)
    return dr[:, None] * y


# ---------------------------------------------------------------------------
# full pipeline


def _layer_inputs(window: TrainingWindow, kind: PenaltyKind, params: PenaltyParams, delta: float):
    s = build_structures(kind, params, window.d, window.beta_hat, window.W_sqrt)
    return s, assemble_v_gamma2(window.V_hat, delta, s)


def pipeline_value(window, kind, params, cost, feasible, delta=1.0, settings=None) -> float:
    s, V = _layer_inputs(window, kind, params, delta)
    sol = solve_periods(V, window.y_hat, s, feasible, settings)
    return cost_value(sol.z, window.realized, cost)


def pipeline_gradient(
    window: TrainingWindow,
    kind: PenaltyKind,
    params: PenaltyParams,
    cost: DecisionCost,
    feasible: FeasibleSet,
    delta: float = 1.0,
    settings: AdmmSettings | None = None,
    tikhonov_eps: float = 1e-6,
    warm=None,
):
    """Cost, raw-parameter gradients and the period solution at ``params``."""
    s, V = _layer_inputs(window, kind, params, delta)
    sol = solve_periods(V, window.y_hat, s, feasible, settings, warm)
    value = cost_value(sol.z, window.realized, cost)
    if not math.isfinite(value):
        raise DivergenceError("decision cost is not finite")
    grads: dict = {}
    if kind.trainable:
        g = cost_gradient(sol.z, window.realized, cost)
        gV, gE, gk = periods_backward(sol, g, tikhonov_eps)
        grads = raw_gradients(
            kind, params, s, gV.sum(axis=0),
            None if gE is None else gE.sum(axis=0), float(gk.sum()), window.W_sqrt,
        )
    return value, grads, sol


class Adam:
    """Adam on a dict of named scalar/array parameters."""

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for name, value in params.items():
            g = np.asarray(grads[name], dtype=float)
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            new = np.asarray(value, dtype=float) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            out[name] = float(new) if np.ndim(value) == 0 else new
        return out


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    cost: float
    grad_norms: dict
    gamma1: float
    gamma2: float
    unconverged: int
    wall_time: float

    @property
    def annualized_volatility(self) -> float:
        return math.sqrt(max(self.cost, 0.0) * PERIODS_PER_YEAR)


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    def deterministic_view(self) -> list:
        """Records without wall time, for reproducibility comparisons."""
        return [(r.iteration, r.cost, tuple(sorted(r.grad_norms.items())), r.gamma1, r.gamma2, r.unconverged)
                for r in self.records]

    def write_csv(self, path, model: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "iteration", "cost"] + [f"grad_inf_{b[:-4]}" for b in BLOCKS] + ["gamma1", "gamma2"])
            for r in self.records:
                w.writerow([model, r.iteration, repr(r.cost)]
                           + [repr(r.grad_norms.get(b, 0.0)) for b in BLOCKS]
                           + [repr(r.gamma1), repr(r.gamma2)])


def train(
    window: TrainingWindow,
    kind: PenaltyKind,
    cost: DecisionCost,
    config: TrainConfig,
    feasible: FeasibleSet,
    params: PenaltyParams | None = None,
) -> tuple[PenaltyParams, TrainTrace]:
    """Fit the penalty parameters of ``kind`` by Adam on the window's decision cost.

    The trace holds ``iterations + 1`` records: the cost at the starting
    point followed by the cost after each update.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(kind, window.d, window.d_x, rng)
    trace = TrainTrace()
    names = kind.trainable
    adam = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    n_batch = max(1, int(math.ceil(config.batch_fraction * window.m)))
    warm_z = warm_mu = None
    start = time.perf_counter()

    for k in range(config.iterations + 1):
        if n_batch < window.m:
            idx = np.sort(rng.choice(window.m, size=n_batch, replace=False))
        else:
            idx = np.arange(window.m)
        sub = window.subset(idx)
        warm = None
        if warm_z is not None:
            warm = (warm_z[idx], warm_mu[idx])
        try:
            value, grads, sol = pipeline_gradient(
                sub, kind, params, cost, feasible, config.delta, config.admm, config.tikhonov_eps, warm
            )
        except SolverFailure as exc:
            period = None if exc.index is None else int(idx[exc.index])
            raise SolverFailure(f"iteration {k}: {exc}", index=period) from exc
        wz, wmu = warm_state(sol)
        if warm_z is None or warm_z.shape[1] != wz.shape[1]:
            warm_z = np.zeros((window.m, wz.shape[1]))
            warm_mu = np.zeros((window.m, wz.shape[1]))
        warm_z[idx], warm_mu[idx] = wz, wmu

        g1, g2, _, _ = transform_params(params)
        norms = {n: float(np.max(np.abs(grads[n]))) for n in names}
        trace.records.append(TraceRecord(
            k, value, norms, g1, g2, int(np.sum(~sol.converged)), time.perf_counter() - start
        ))
        if not names:
            # nothing to train: the cost is constant
            for j in range(1, config.iterations + 1):
                trace.records.append(TraceRecord(j, value, {}, g1, g2, trace.records[0].unconverged,
                                                 time.perf_counter() - start))
            break
        if k < config.iterations:
            for n in names:
                if not np.all(np.isfinite(grads[n])):
                    raise DivergenceError(f"non-finite gradient for {n} at iteration {k}")
            current = {n: params.get(n) for n in names}
            params = params.updated(**adam.step(current, grads))
    return params, trace


def grad_check(
    window: TrainingWindow,
    kind: PenaltyKind,
    cost: DecisionCost,
    feasible: FeasibleSet,
    params: PenaltyParams,
    block: str,
    step: float = 1e-5,
    delta: float = 1.0,
    settings: AdmmSettings | None = None,
    tikhonov_eps: float = 1e-6,
    return_arrays: bool = False,
):
    """Max relative error between the analytic raw-parameter gradient and central differences.

    The error of an entry is ``|analytic - fd| / max(|fd|, 1e-8)``.
    """
    name = block if block.endswith("_raw") else block + "_raw"
    if name not in kind.trainable:
        raise ValueError(f"{kind.value} has no trainable block {block!r}")
    settings = settings or AdmmSettings(eps_abs=1e-10, eps_rel=1e-10, max_iter=50000)
    _, grads, _ = pipeline_gradient(window, kind, params, cost, feasible, delta, settings, tikhonov_eps)
    analytic = np.atleast_1d(np.asarray(grads[name], dtype=float))
    base = np.atleast_1d(np.asarray(params.get(name), dtype=float))
    fd = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sign in (1.0, -1.0):
            x = base.copy()
            x[idx] += sign * step
            value = x if np.ndim(params.get(name)) else float(x[0])
            vals.append(pipeline_value(window, kind, params.updated(**{name: value}), cost, feasible, delta, settings))
        fd[idx] = (vals[0] - vals[1]) / (2 * step)
    err = float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)))
    if return_arrays:
        return err, analytic, fd
    return err
