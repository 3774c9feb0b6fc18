"""Randomized-universe walk-forward experiments and report generation.

Two estimation protocols are supported, keyed by the decision cost:

* ``min-variance``: a contemporaneous factor model. ``V_hat_i`` is
  ``beta' W_i beta + F`` with ``W_i`` the trailing feature covariance through
  week ``i - 1``, and the mean term is dropped (``y_hat = 0``).
* ``sharpe``: a predictive regression of ``y_t`` on ``x_{t-1}`` gives
  ``y_hat_i``; ``V_hat_i`` is the trailing sample covariance of returns.

In both cases week ``i`` only sees rows ``< i``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DimensionError, InvalidProblemError, SolverFailure
from .penalty import PenaltyKind, PenaltyParams, assemble_v_gamma2, build_structures, init_params, psd_sqrt
from .prediction import RegressionModel, fit_beta, floor_eigenvalues, rolling_covariance
from .trainer import (
    PERIODS_PER_YEAR,
    CostKind,
    DecisionCost,
    FeasibleSet,
    TrainConfig,
    TrainingWindow,
    TrainTrace,
    solve_periods,
    train,
)

__all__ = [
    "MarketData",
    "ExperimentConfig",
    "ModelResult",
    "BacktestReport",
    "generate_synthetic",
    "sample_universe",
    "build_window",
    "run_trial",
    "run_trial_models",
    "run_experiment",
    "annualized_metrics",
    "rolling_excess_metric",
    "aggregate_report",
    "sign_test",
    "write_run",
    "read_run",
    "report_from_dir",
    "split_indices",
    "fit_estimator",
    "synthetic_fixture",
    "FIXTURE",
    "EXPERIMENT_DELTA",
    "TrialSetup",
    "prepare_trial",
]

# the synthetic market shipped as the default experiment data
FIXTURE = {"universe": 100, "weeks": 468, "d_x": 5, "seed": 7}
# risk aversion used by the experiment protocols
EXPERIMENT_DELTA = 20.0


@dataclass(frozen=True)
class MarketData:
    dates: np.ndarray  # datetime64[D], strictly increasing
    returns: np.ndarray  # (T, N)
    features: np.ndarray  # (T, d_x)
    labels: tuple
    planted_beta: np.ndarray | None = None
    planted_residual_cov: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.dates)
        if self.returns.shape[0] != T or self.features.shape[0] != T:
            raise DimensionError("returns and features must share the date index")
        if self.returns.shape[1] != len(self.labels):
            raise DimensionError("one label per return column is required")
        if T > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise InvalidProblemError("dates must be strictly increasing")
        if not (np.all(np.isfinite(self.returns)) and np.all(np.isfinite(self.features))):
            raise InvalidProblemError("market data contains non-finite values")

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def select(self, cols) -> "MarketData":
        cols = np.asarray(cols, dtype=int)
        beta = None if self.planted_beta is None else self.planted_beta[:, cols]
        F = None if self.planted_residual_cov is None else self.planted_residual_cov[np.ix_(cols, cols)]
        return MarketData(self.dates, self.returns[:, cols], self.features,
                          tuple(self.labels[c] for c in cols), beta, F)

    @classmethod
    def read_csv(cls, returns_path, features_path) -> "MarketData":
        d1, labels, R = _read_table(returns_path)
        d2, _, X = _read_table(features_path)
        if len(d1) != len(d2) or np.any(d1 != d2):
            raise InvalidProblemError("returns and features files have different dates")
        return cls(d1, R, X, tuple(labels))

    def write_csv(self, returns_path, features_path) -> None:
        _write_table(returns_path, self.dates, self.labels, self.returns)
        _write_table(features_path, self.dates, [f"f{k}" for k in range(self.features.shape[1])], self.features)


def _read_table(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip().lower() != "date":
        raise InvalidProblemError(f"{path}:1: header must start with 'date'")
    header = [h.strip() for h in rows[0][1:]]
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header) + 1:
            raise InvalidProblemError(f"{path}:{lineno}: expected {len(header) + 1} fields, got {len(row)}")
        try:
            dates.append(np.datetime64(row[0].strip(), "D"))
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise InvalidProblemError(f"{path}:{lineno}: {exc}") from None
    return np.array(dates, dtype="datetime64[D]"), header, np.array(values, dtype=float).reshape(len(dates), len(header))


def _write_table(path, dates, header, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *header])
        for d, row in zip(dates, values):
            w.writerow([str(d), *(repr(float(v)) for v in row)])


def generate_synthetic(
    universe: int = 100,
    weeks: int = 1600,
    d_x: int = 5,
    seed: int = 7,
    noise: float = 1.0,
) -> MarketData:
    """Weekly factor-model returns ``y_t = beta' x_t + noise * e_t``.

    Observed factors follow a persistent AR(1) with slowly cycling
    volatilities. The residual ``e_t`` loads on two hidden factors that the
    features do not span, on top of heterogeneous idiosyncratic noise, so
    a diagonal residual model understates co-movement.
    """
    if min(universe, weeks, d_x) <= 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(weeks)
    base_vol = np.linspace(0.022, 0.010, d_x)
    phase = rng.uniform(0, 2 * np.pi, size=d_x)
    vol = base_vol * (1 + 0.4 * np.sin(2 * np.pi * t[:, None] / 260 + phase))
    corr = np.full((d_x, d_x), 0.2) + 0.8 * np.eye(d_x)
    shocks = rng.standard_normal((weeks, d_x)) @ np.linalg.cholesky(corr).T
    drift = np.full(d_x, 0.0008)
    x = np.zeros((weeks, d_x))
    prev = np.zeros(d_x)
    for i in range(weeks):
        prev = 0.1 * prev + vol[i] * shocks[i]
        x[i] = drift + prev

    beta = rng.normal(0.0, 0.4, size=(d_x, universe))
    beta[0] = rng.normal(1.0, 0.3, size=universe)

    hidden_loadings = rng.normal(0.0, 1.0, size=(universe, 2))
    hidden_vol = np.array([0.012, 0.008])
    idio_vol = rng.uniform(0.012, 0.035, size=universe)
    F = hidden_loadings @ np.diag(hidden_vol**2) @ hidden_loadings.T + np.diag(idio_vol**2)
    eps = rng.standard_normal((weeks, 2)) * hidden_vol @ hidden_loadings.T
    eps += rng.standard_normal((weeks, universe)) * idio_vol
    y = x @ beta + noise * eps

    dates = np.datetime64("2000-01-07", "D") + 7 * t.astype("timedelta64[D]")
    labels = tuple(f"A{j:03d}" for j in range(universe))
    return MarketData(dates, y, x, labels, beta, noise**2 * F)


def synthetic_fixture(seed: int | None = None) -> MarketData:
    """The default synthetic market (100 assets, 468 weeks, 5 features)."""
    cfg = dict(FIXTURE)
    if seed is not None:
        cfg["seed"] = seed
    return generate_synthetic(**cfg)


def sample_universe(universe_size: int, n: int, trial_index: int, seed: int) -> np.ndarray:
    """``n`` distinct asset indices in ascending order, fixed by ``(seed, trial_index)``."""
    if n > universe_size:
        raise InvalidProblemError(f"cannot draw {n} assets from a universe of {universe_size}")
    if n <= 0:
        raise ValueError("n must be positive")
    if n == universe_size:
        return np.arange(n)
    rng = np.random.default_rng([seed, trial_index])
    return np.sort(rng.choice(universe_size, size=n, replace=False))


@dataclass(frozen=True)
class ExperimentConfig:
    n_assets: int = 50
    trials: int = 30
    train_start: str | None = None
    train_end: str | None = None
    test_start: str | None = None
    test_end: str | None = None
    train_fraction: float = 0.5
    constraint_set: FeasibleSet = FeasibleSet.LONG_ONLY_FULLY_INVESTED
    cost: DecisionCost = field(default_factory=DecisionCost)
    kinds: tuple = (PenaltyKind.NOMINAL, PenaltyKind.ELASTIC_NET_P)
    lookback_weeks: int = 52
    rolling_window_weeks: int = 156
    seed: int = 7
    train: TrainConfig = field(default_factory=lambda: TrainConfig(delta=EXPERIMENT_DELTA))

    def __post_init__(self):
        if self.n_assets <= 0 or self.trials <= 0:
            raise ValueError("n_assets and trials must be positive")
        if self.lookback_weeks < 2 or self.rolling_window_weeks < 2:
            raise ValueError("windows must be at least 2 weeks")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def split_indices(dates: np.ndarray, config: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the training and test ranges."""
    T = len(dates)

    def bound(value, default):
        return default if value is None else np.datetime64(value, "D")

    if all(v is None for v in (config.train_start, config.train_end, config.test_start, config.test_end)):
        cut = int(round(config.train_fraction * T))
        train_idx, test_idx = np.arange(cut), np.arange(cut, T)
    else:
        lo, hi = dates[0], dates[-1]
        tr = (dates >= bound(config.train_start, lo)) & (dates <= bound(config.train_end, hi))
        te = (dates >= bound(config.test_start, lo)) & (dates <= bound(config.test_end, hi))
        train_idx, test_idx = np.flatnonzero(tr), np.flatnonzero(te)
    if train_idx.size == 0 or test_idx.size == 0:
        raise InvalidProblemError("empty training or test range")
    if train_idx[-1] >= test_idx[0]:
        raise InvalidProblemError("the training range must end before the test range starts")
    return train_idx, test_idx


@dataclass(frozen=True)
class Estimator:
    """Frozen prediction model plus the protocol used to form moments."""

    model: RegressionModel
    predictive: bool
    lookback: int
    W_sqrt: np.ndarray

    def moments(self, data: MarketData, periods: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(y_hat, V_hat)`` for each period using rows strictly before it."""
        L = self.lookback
        periods = np.asarray(periods, dtype=int)
        if periods.size and periods.min() < L:
            raise InvalidProblemError(f"period {int(periods.min())} has fewer than {L} weeks of history")
        n = data.n_assets
        if self.predictive:
            # entry j of the rolling series covers rows j .. j+L-1, so period i uses i-L
            V = np.stack([_window_cov(data.returns[i - L : i]) for i in periods]) if periods.size else np.zeros((0, n, n))
            y = data.features[periods - 1] @ self.model.beta + self.model.intercept
        else:
            W = np.stack([_window_cov(data.features[i - L : i]) for i in periods]) if periods.size else None
            B = self.model.beta
            F = np.diag(np.maximum(self.model.residual_var, 1e-8))
            V = np.einsum("xi,txw,wj->tij", B, W, B) + F if W is not None else np.zeros((0, n, n))
            y = np.zeros((periods.size, n))
        return y, floor_eigenvalues(V) if periods.size else V


def _window_cov(block: np.ndarray) -> np.ndarray:
    return rolling_covariance(block, block.shape[0])[0]


def fit_estimator(data: MarketData, train_idx: np.ndarray, cost: DecisionCost, lookback: int) -> Estimator:
    X, Y = data.features[train_idx], data.returns[train_idx]
    predictive = cost.kind is CostKind.SHARPE_RATIO
    model = fit_beta(X[:-1], Y[1:]) if predictive else fit_beta(X, Y)
    W_sqrt = psd_sqrt(np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1]))
    return Estimator(model, predictive, lookback, W_sqrt)


def build_window(data: MarketData, est: Estimator, periods: np.ndarray) -> TrainingWindow:
    y, V = est.moments(data, periods)
    return TrainingWindow(y, V, data.returns[periods], est.model.beta, est.W_sqrt)


@dataclass
class ModelResult:
    kind: PenaltyKind
    trial: int
    universe: np.ndarray
    dates: np.ndarray
    weights: np.ndarray
    returns: np.ndarray
    metrics: dict
    params: PenaltyParams
    trace: TrainTrace | None


def annualized_metrics(r, risk_free: float = 0.0) -> dict:
    """Annualized mean, volatility and Sharpe of a weekly return series (population std)."""
    r = np.asarray(r, dtype=float)
    mean = float(np.mean(r)) * PERIODS_PER_YEAR
    vol = float(np.std(r)) * math.sqrt(PERIODS_PER_YEAR)
    sharpe = (mean - risk_free * PERIODS_PER_YEAR) / vol if vol > 0 else float("nan")
    return {"mean": mean, "vol": vol, "sharpe": sharpe}


def solve_frozen(window: TrainingWindow, kind: PenaltyKind, params: PenaltyParams, config: ExperimentConfig):
    s = build_structures(kind, params, window.d, window.beta_hat, window.W_sqrt)
    V = assemble_v_gamma2(window.V_hat, config.train.delta, s)
    return solve_periods(V, window.y_hat, s, config.constraint_set, config.train.admm)


@dataclass
class TrialSetup:
    """Universe, windows and training settings of one trial."""

    universe: np.ndarray
    data: MarketData
    test_dates: np.ndarray
    train_window: TrainingWindow
    test_window: TrainingWindow
    train_config: TrainConfig
    d_x: int


def prepare_trial(data: MarketData, config: ExperimentConfig, trial_index: int) -> TrialSetup:
    universe = sample_universe(data.n_assets, config.n_assets, trial_index, config.seed)
    sub = data.select(universe)
    train_idx, test_idx = split_indices(sub.dates, config)
    L = config.lookback_weeks
    est = fit_estimator(sub, train_idx, config.cost, L)
    train_periods = train_idx[train_idx >= L]
    if train_periods.size < 2:
        raise InvalidProblemError(f"training range needs more than {L} weeks of history")
    if test_idx[0] < L:
        raise InvalidProblemError("test range starts before enough history is available")
    # one training seed per trial, derived from the root seed
    seed = int(np.random.default_rng([config.seed, trial_index, 1]).integers(2**31))
    return TrialSetup(
        universe, sub, sub.dates[test_idx],
        build_window(sub, est, train_periods), build_window(sub, est, test_idx),
        replace(config.train, seed=seed), est.W_sqrt.shape[0],
    )


def run_trial_models(data: MarketData, config: ExperimentConfig, trial_index: int,
                     kinds=None, train_models: bool = True) -> list[ModelResult]:
    """Train every configured kind on one random universe and walk the test range."""
    kinds = config.kinds if kinds is None else kinds
    setup = prepare_trial(data, config, trial_index)
    tcfg = setup.train_config
    results = []
    for kind in kinds:
        trace = None
        if train_models:
            params, trace = train(setup.train_window, kind, config.cost, tcfg, config.constraint_set)
        else:
            params = init_params(kind, setup.data.n_assets, setup.d_x, np.random.default_rng(tcfg.seed))
        try:
            sol = solve_frozen(setup.test_window, kind, params, config)
        except SolverFailure as exc:
            date = None if exc.index is None else str(setup.test_dates[exc.index])
            raise SolverFailure(f"{kind.value} trial {trial_index}: {exc}", index=exc.index, date=date) from exc
        r = np.einsum("ij,ij->i", sol.z, setup.test_window.realized)
        results.append(ModelResult(
            kind, trial_index, setup.universe, setup.test_dates, sol.z, r,
            annualized_metrics(r, config.cost.risk_free), params, trace,
        ))
    return results


def run_trial(data: MarketData, config: ExperimentConfig, kind: PenaltyKind, trial_index: int) -> ModelResult:
    return run_trial_models(data, config, trial_index, kinds=(kind,))[0]


def _trial_job(args):
    data, config, trial = args
    return run_trial_models(data, config, trial)


def run_experiment(data: MarketData, config: ExperimentConfig, workers: int = 1) -> list[ModelResult]:
    """All trials times kinds; results are ordered by trial then kind regardless of ``workers``."""
    jobs = [(data, config, t) for t in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_trial_job, jobs))
    else:
        chunks = [_trial_job(j) for j in jobs]
    return [r for chunk in chunks for r in chunk]


def rolling_excess_metric(series_a, series_b, window: int, metric: str = "volatility",
                          risk_free: float = 0.0) -> np.ndarray:
    """Trailing-window annualized metric of ``a`` minus that of ``b``.

    Entry ``j`` corresponds to the window ending at index ``j + window - 1``.
    """
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("series must be aligned one-dimensional arrays")
    if not 2 <= window <= a.size:
        raise ValueError("window must lie in [2, len(series)]")
    from numpy.lib.stride_tricks import sliding_window_view

    def metric_of(x):
        w = sliding_window_view(x, window)
        sd = w.std(axis=1) * math.sqrt(PERIODS_PER_YEAR)
        if metric == "volatility":
            return sd
        if metric == "sharpe":
            return (w.mean(axis=1) - risk_free) * PERIODS_PER_YEAR / sd
        raise ValueError(f"unknown metric {metric!r}")

    return metric_of(a) - metric_of(b)


def sign_test(model_values, nominal_values) -> dict:
    """One-sided paired sign test that ``model < nominal`` more often than not."""
    m = np.asarray(model_values, dtype=float)
    n = np.asarray(nominal_values, dtype=float)
    diff = m - n
    wins = int(np.sum(diff < 0))
    used = int(np.sum(diff != 0))
    p = float(stats.binomtest(wins, used, 0.5, alternative="greater").pvalue) if used else 1.0
    return {"wins": wins, "trials": used, "p_value": p}


@dataclass
class BacktestReport:
    per_trial: list  # dicts: trial, model, mean, vol, sharpe
    aggregates: dict
    percent_vs_nominal: dict
    sign_tests: dict
    rolling: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "percent_vs_nominal": self.percent_vs_nominal,
            "sign_tests": self.sign_tests,
        }


def _summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    # shifted sums so identical trials give an exactly zero spread
    d = v - v[0]
    mean = float(v[0] + math.fsum(d) / v.size)
    if v.size > 1:
        ss = max(math.fsum(d**2) - math.fsum(d) ** 2 / v.size, 0.0)
        se = math.sqrt(ss / (v.size - 1) / v.size)
    else:
        se = float("nan")
    return {
        "mean": mean,
        "se": se,
        "median": float(np.median(v)),
        "q1": float(np.percentile(v, 25)),
        "q3": float(np.percentile(v, 75)),
    }


def aggregate_report(per_trial: list[dict], nominal: str = "nominal") -> BacktestReport:
    """Averages, standard errors and percent changes against the nominal model."""
    models = list(dict.fromkeys(row["model"] for row in per_trial))
    trials = sorted({row["trial"] for row in per_trial})
    if len(trials) < 2:
        raise InvalidProblemError("aggregation needs at least two trials")
    table = {(row["model"], row["trial"]): row for row in per_trial}
    aggregates = {}
    for model in models:
        rows = [table[(model, t)] for t in trials if (model, t) in table]
        aggregates[model] = {k: _summary([r[k] for r in rows]) for k in ("mean", "vol", "sharpe")}
        aggregates[model]["variance"] = _summary([r["vol"] ** 2 for r in rows])

    percent, tests = {}, {}
    if nominal in models:
        for model in models:
            if model == nominal:
                continue
            pct = {}
            for key in ("variance", "vol", "sharpe"):
                vals, used = [], []
                for t in trials:
                    a, b = table.get((model, t)), table.get((nominal, t))
                    if a is None or b is None:
                        continue
                    va = a["vol"] ** 2 if key == "variance" else a[key]
                    vb = b["vol"] ** 2 if key == "variance" else b[key]
                    if vb == 0 or not math.isfinite(vb):
                        continue
                    vals.append((va - vb) / vb)
                    used.append(t)
                if vals:
                    pct[key] = {"per_trial": vals, "trials": used, **_summary(vals)}
                else:
                    pct[key] = {"per_trial": [], "trials": [], "flag": "nominal metric is zero; percent omitted"}
            percent[model] = pct
            paired = [(table[(model, t)]["vol"] ** 2, table[(nominal, t)]["vol"] ** 2)
                      for t in trials if (model, t) in table and (nominal, t) in table]
            tests[model] = sign_test([p[0] for p in paired], [p[1] for p in paired])
    return BacktestReport(per_trial, aggregates, percent, tests)


# ---------------------------------------------------------------------------
# run directory I/O


def _fmt(x) -> str:
    return repr(float(x))


def write_run(out_dir, results: list[ModelResult], config_echo: dict, seed: int,
              rolling_window: int, risk_free: float = 0.0) -> BacktestReport:
    """Write every per-trial output plus the aggregated report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = max(len(r.universe) for r in results)
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "date"] + [f"w{j}" for j in range(n)])
        for r in results:
            for d, row in zip(r.dates, r.weights):
                w.writerow([r.trial, r.kind.value, str(d)] + [_fmt(v) for v in row])
    with open(out / "universes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial"] + [f"slot{j}" for j in range(n)])
        seen = set()
        for r in results:
            if r.trial not in seen:
                seen.add(r.trial)
                w.writerow([r.trial] + [int(i) for i in r.universe])
    with open(out / "returns.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "date", "return"])
        for r in results:
            for d, v in zip(r.dates, r.returns):
                w.writerow([r.trial, r.kind.value, str(d), _fmt(v)])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "mean", "vol", "sharpe"])
        for r in results:
            w.writerow([r.trial, r.kind.value, _fmt(r.metrics["mean"]), _fmt(r.metrics["vol"]), _fmt(r.metrics["sharpe"])])
    with open(out / "training_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "iteration", "cost", "grad_inf_gamma1", "grad_inf_gamma2",
                    "grad_inf_theta1", "grad_inf_theta2", "gamma1", "gamma2"])
        for r in results:
            if r.trace is None:
                continue
            for rec in r.trace.records:
                w.writerow([r.trial, r.kind.value, rec.iteration, _fmt(rec.cost)]
                           + [_fmt(rec.grad_norms.get(b, 0.0)) for b in
                              ("gamma1_raw", "gamma2_raw", "theta1_raw", "theta2_raw")]
                           + [_fmt(rec.gamma1), _fmt(rec.gamma2)])
    params = [{"trial": r.trial, "model": r.kind.value, "params": r.params.to_dict()} for r in results]
    (out / "params.json").write_text(json.dumps(params, indent=1, sort_keys=True) + "\n")
    (out / "config_echo.json").write_text(json.dumps({"config": config_echo, "seed": seed}, indent=1, sort_keys=True) + "\n")
    return report_from_dir(out, rolling_window, risk_free)


def read_run(out_dir):
    """Per-trial metrics rows and return series from a run directory."""
    out = Path(out_dir)
    for name in ("metrics.csv", "returns.csv", "config_echo.json"):
        if not (out / name).exists():
            raise FileNotFoundError(f"missing run output: {out / name}")
    with open(out / "metrics.csv", newline="") as fh:
        metrics = [{"trial": int(r["trial"]), "model": r["model"], "mean": float(r["mean"]),
                    "vol": float(r["vol"]), "sharpe": float(r["sharpe"])} for r in csv.DictReader(fh)]
    series: dict = {}
    with open(out / "returns.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["trial"]), r["model"])
            series.setdefault(key, ([], []))
            series[key][0].append(r["date"])
            series[key][1].append(float(r["return"]))
    echo = json.loads((out / "config_echo.json").read_text())
    return metrics, series, echo


def report_from_dir(out_dir, rolling_window: int, risk_free: float = 0.0) -> BacktestReport:
    """Re-aggregate a run directory into summary.json, rolling.csv and percent_vs_nominal.csv."""
    out = Path(out_dir)
    metrics, series, echo = read_run(out)
    report = aggregate_report(metrics)
    metric = "sharpe" if echo["config"].get("experiment", {}).get("cost") == "sharpe" else "volatility"

    # average rolling excess metric over trials, per model, against the nominal model
    rolling: dict = {}
    trials = sorted({k[0] for k in series})
    for model in dict.fromkeys(k[1] for k in series):
        if model == "nominal":
            continue
        curves = []
        dates = None
        for t in trials:
            if (t, model) not in series or (t, "nominal") not in series:
                continue
            a, b = np.array(series[(t, model)][1]), np.array(series[(t, "nominal")][1])
            if a.size < rolling_window:
                continue
            curves.append(rolling_excess_metric(a, b, rolling_window, metric, risk_free))
            dates = series[(t, model)][0][rolling_window - 1:]
        if curves:
            rolling[model] = (dates, np.mean(curves, axis=0))
    report.rolling = rolling
    with open(out / "rolling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "model", f"excess_{metric}"])
        for model, (dates, vals) in rolling.items():
            for d, v in zip(dates, vals):
                w.writerow([d, model, _fmt(v)])
    with open(out / "percent_vs_nominal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "pct_variance", "pct_vol", "pct_sharpe"])
        trial_ids = sorted({row["trial"] for row in metrics})
        for model, pct in report.percent_vs_nominal.items():
            cols = [dict(zip(pct[k]["trials"], pct[k]["per_trial"])) for k in ("variance", "vol", "sharpe")]
            for t in trial_ids:
                w.writerow([t, model, *(_fmt(c[t]) if t in c else "" for c in cols)])
    summary = {**report.to_json(), "config": echo["config"], "seed": echo["seed"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return report
