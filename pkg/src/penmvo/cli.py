"""Command-line entry point.

Subcommands ``solve``, ``gradcheck``, ``train``, ``backtest`` and ``report``.
Settings come from an INI file (see ``configs/sample.ini``) overridden by flags.

Exit codes: 0 success, 1 usage or parse error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backtest import (
    ExperimentConfig,
    MarketData,
    prepare_trial,
    report_from_dir,
    run_experiment,
    synthetic_fixture,
    write_run,
)
from .errors import (
    DegenerateCostError,
    DimensionError,
    DivergenceError,
    FactorizationError,
    InfeasibleError,
    InvalidProblemError,
    NotConvergedError,
    PenmvoError,
    SolverFailure,
)
from .l1_dual import L1PenalizedProblem, duality_gap, solve_l1_qp
from .penalty import PenaltyKind, init_params
from .qp_core import AdmmSettings, QpProblem, admm_solve, objective_value
from .trainer import (
    KAPPA_ROUTE_THRESHOLD,
    DecisionCost,
    FeasibleSet,
    grad_check,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
GRADCHECK_TOL = 1e-4

NUMERICAL_ERRORS = (
    DegenerateCostError, DivergenceError, FactorizationError, InfeasibleError, NotConvergedError, SolverFailure,
)


class UsageError(Exception):
    """Bad flags, config keys or input files."""


# --------------------------------------------------------------------------- config


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_str(text: str):
    text = text.strip()
    return text or None


def _kinds(text: str) -> tuple:
    kinds = tuple(PenaltyKind.parse(k) for k in text.split(",") if k.strip())
    if not kinds:
        raise ValueError("kinds must name at least one penalty kind")
    return kinds


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(k.value for k in value)
    if hasattr(value, "value"):
        return value.value
    return str(value)


# section -> key -> parser; keys of [experiment], [train] and [admm] are the
# dataclass field names, with cost, risk_free and constraint_set handled apart
EXPERIMENT_KEYS = {
    "n_assets": int, "trials": int, "train_start": _opt_str, "train_end": _opt_str,
    "test_start": _opt_str, "test_end": _opt_str, "train_fraction": float,
    "constraint_set": FeasibleSet.parse, "cost": str, "risk_free": float, "kinds": _kinds,
    "lookback_weeks": int, "rolling_window_weeks": int, "seed": int,
}
TRAIN_KEYS = {
    "learning_rate": float, "iterations": int, "adam_beta1": float, "adam_beta2": float,
    "adam_eps": float, "delta": float, "batch_fraction": float, "tikhonov_eps": float,
}
ADMM_KEYS = {"rho": float, "eps_abs": float, "eps_rel": float, "max_iter": int, "polish": _bool}
DATA_KEYS = {"returns": _opt_str, "features": _opt_str, "synthetic": _bool}
RUN_KEYS = {"output_dir": str, "threads": int, "trial": int, "gradcheck_assets": int, "gradcheck_periods": int}
SCHEMA = {"experiment": EXPERIMENT_KEYS, "train": TRAIN_KEYS, "admm": ADMM_KEYS, "data": DATA_KEYS, "run": RUN_KEYS}


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    returns: str | None = None
    features: str | None = None
    synthetic: bool = False
    output_dir: str = "results"
    threads: int = 1
    trial: int = 0
    gradcheck_assets: int = 6
    gradcheck_periods: int = 12

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.trial < 0 or self.trial >= self.experiment.trials:
            raise ValueError(f"trial must lie in [0, {self.experiment.trials})")
        if self.gradcheck_assets < 1 or self.gradcheck_periods < 2:
            raise ValueError("gradcheck_assets must be >= 1 and gradcheck_periods >= 2")

    @classmethod
    def from_sections(cls, sections: dict) -> "RunConfig":
        """Build a config from ``{section: {key: text}}``, rejecting unknown names."""
        parsed: dict = {}
        for name, items in sections.items():
            if name not in SCHEMA:
                raise UsageError(f"unknown config section [{name}]")
            for key, text in items.items():
                if key not in SCHEMA[name]:
                    raise UsageError(f"unknown key {key!r} in [{name}]")
                try:
                    parsed.setdefault(name, {})[key] = SCHEMA[name][key](text)
                except ValueError as exc:
                    raise UsageError(f"[{name}] {key}: {exc}") from None
        try:
            return cls._build(parsed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    @classmethod
    def _build(cls, p: dict) -> "RunConfig":
        exp = dict(p.get("experiment", {}))
        cost = DecisionCost.parse(exp.pop("cost", "min-variance"), exp.pop("risk_free", 0.0))
        admm = AdmmSettings(**p.get("admm", {}))
        base_train = ExperimentConfig().train
        tcfg = replace(base_train, admm=admm, **p.get("train", {}))
        experiment = ExperimentConfig(cost=cost, train=tcfg, **exp)
        return cls(experiment=experiment, **p.get("data", {}), **p.get("run", {}))

    def to_sections(self) -> dict:
        """Inverse of :meth:`from_sections`; every value is written as text."""
        e, t = self.experiment, self.experiment.train
        exp = {k: _fmt(getattr(e, k)) for k in EXPERIMENT_KEYS if k not in ("cost", "risk_free")}
        exp["cost"] = e.cost.kind.value
        exp["risk_free"] = _fmt(e.cost.risk_free)
        return {
            "experiment": exp,
            "train": {k: _fmt(getattr(t, k)) for k in TRAIN_KEYS},
            "admm": {f.name: _fmt(getattr(t.admm, f.name)) for f in fields(AdmmSettings)},
            "data": {k: _fmt(getattr(self, k)) for k in DATA_KEYS},
            "run": {k: _fmt(getattr(self, k)) for k in RUN_KEYS},
        }


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(args) -> RunConfig:
    sections = read_config_file(args.config) if args.config else {}
    overrides = {
        ("experiment", "seed"): args.seed,
        ("experiment", "kinds"): args.kinds,
        ("run", "output_dir"): args.output_dir,
        ("run", "threads"): args.threads,
        ("data", "synthetic"): "true" if args.synthetic else None,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            sections.setdefault(section, {})[key] = str(value)
    config = RunConfig.from_sections(sections)
    if not config.synthetic:
        for path in (config.returns, config.features):
            if path is not None and not Path(path).exists():
                raise UsageError(f"data file not found: {path}")
    return config


def load_data(config: RunConfig) -> MarketData:
    if config.synthetic:
        return synthetic_fixture(config.experiment.seed)
    if config.returns is None or config.features is None:
        raise UsageError("no data configured: set [data] returns and features, or pass --synthetic")
    return MarketData.read_csv(config.returns, config.features)


# --------------------------------------------------------------------------- solve

PROBLEM_BLOCKS = ("V", "y_hat", "E", "A", "b", "G", "h", "kappa")


def read_problem_file(path) -> dict:
    """Parse a sectioned CSV: ``[V]`` then rows, ``[y_hat]`` then one row, and so on.

    Blank lines and lines starting with ``#`` are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"problem file not found: {path}")
    blocks: dict = {}
    current = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if text.startswith("["):
                name = text.strip("[]").strip()
                if not text.endswith("]") or name not in PROBLEM_BLOCKS:
                    raise UsageError(f"{path}:{lineno}:1: unknown block header {text!r}")
                if name in blocks:
                    raise UsageError(f"{path}:{lineno}:1: duplicate block [{name}]")
                current = blocks[name] = []
                continue
            if current is None:
                raise UsageError(f"{path}:{lineno}:1: data before the first block header")
            row = []
            col = 1
            for cell in next(csv.reader([text])):
                try:
                    row.append(float(cell))
                except ValueError:
                    raise UsageError(f"{path}:{lineno}:{col}: cannot parse {cell.strip()!r} as a number") from None
                col += len(cell) + 1
            if current and len(row) != len(current[-1]):
                raise UsageError(f"{path}:{lineno}:1: expected {len(current[-1])} values, got {len(row)}")
            current.append(row)
    for name in ("V", "y_hat"):
        if name not in blocks:
            raise UsageError(f"{path}: missing required block [{name}]")
    out = {k: np.array(v, dtype=float) for k, v in blocks.items()}
    for vec in ("y_hat", "b", "h"):
        if vec in out:
            out[vec] = out[vec].ravel()
    if "kappa" in out:
        if out["kappa"].size != 1:
            raise UsageError(f"{path}: [kappa] must hold a single value")
        out["kappa"] = float(out["kappa"].ravel()[0])
    return out


def _box_form(G: np.ndarray, h: np.ndarray, d: int):
    """Bounds equivalent to ``G z <= h`` when every row is a signed unit vector, else None."""
    lower, upper = np.full(d, -np.inf), np.full(d, np.inf)
    for g, hi in zip(G, h):
        nz = np.flatnonzero(g)
        if nz.size != 1:
            return None
        j, c = nz[0], g[nz[0]]
        if c > 0:
            upper[j] = min(upper[j], hi / c)
        else:
            lower[j] = max(lower[j], hi / c)
    return lower, upper


def _vector(z) -> str:
    return " ".join(f"{v:.10g}" for v in z)


def cmd_solve(args, out=None) -> int:
    out = out or sys.stdout
    blocks = read_problem_file(args.problem)
    settings = AdmmSettings(eps_abs=args.eps, eps_rel=args.eps, max_iter=args.max_iter)
    try:
        problem = L1PenalizedProblem.create(
            blocks["V"], blocks["y_hat"], blocks.get("E"), blocks.get("kappa", 0.0),
            blocks.get("A"), blocks.get("b"), blocks.get("G"), blocks.get("h"),
        )
    except (DimensionError, InvalidProblemError) as exc:
        raise UsageError(f"{args.problem}: {exc}") from None
    d = problem.d
    l1 = problem.E is not None and problem.kappa > KAPPA_ROUTE_THRESHOLD
    box = None if l1 else _box_form(problem.G, problem.h, d)

    if box is not None:
        qp = QpProblem.create(problem.V_gamma2, -problem.y_hat, problem.A, problem.b, *box)
        sol = admm_solve(qp, settings)
        z = sol.z_star
        print("route: primal", file=out)
        print(f"z*: {_vector(z)}", file=out)
        print(f"objective: {objective_value(qp, z):.12g}", file=out)
        print(f"kkt_residual: {sol.kkt_residual(qp):.3e}", file=out)
        converged = sol.converged
        iterations = sol.iterations
    else:
        if not l1:
            # general inequalities without an L1 term go through the dual with no box block
            problem = replace(problem, E=None)
        sol = solve_l1_qp(problem, settings)
        z = sol.z_star
        print("route: dual", file=out)
        print(f"z*: {_vector(z)}", file=out)
        print(f"objective: {problem.primal_objective(z):.12g}", file=out)
        converged = sol.admm.converged
        try:
            gap = duality_gap(problem, sol)
            print(f"duality_gap: {gap:.3e}", file=out)
        except InfeasibleError as exc:
            print(f"duality_gap: undefined ({exc})", file=out)
            converged = False
        iterations = sol.admm.iterations
    feas = 0.0
    if problem.A.shape[0]:
        feas = max(feas, float(np.max(np.abs(problem.A @ z - problem.b))))
    if problem.G.shape[0]:
        feas = max(feas, float(np.max(np.maximum(problem.G @ z - problem.h, 0.0))))
    print(f"primal_infeasibility: {feas:.3e}", file=out)
    print(f"iterations: {iterations}", file=out)
    print(f"converged: {'yes' if converged else 'no'}", file=out)
    return EXIT_OK if converged else EXIT_NUMERICAL


# --------------------------------------------------------------------------- gradcheck


def gradcheck_rows(config: RunConfig, data: MarketData) -> list[tuple[str, str, float]]:
    """Max relative error per (kind, block) on a small slice of one trial's training window."""
    e = config.experiment
    small = replace(e, n_assets=min(config.gradcheck_assets, e.n_assets, data.n_assets))
    setup = prepare_trial(data, small, config.trial)
    win = setup.train_window
    win = win.subset(np.arange(max(0, win.m - config.gradcheck_periods), win.m))
    rows = []
    for kind in e.kinds:
        params = init_params(kind, win.d, setup.d_x, np.random.default_rng(setup.train_config.seed))
        for block in kind.trainable:
            err = grad_check(win, kind, e.cost, e.constraint_set, params, block,
                             delta=e.train.delta, tikhonov_eps=e.train.tikhonov_eps)
            rows.append((kind.value, block[:-4], err))
    return rows


def cmd_gradcheck(args, out=None) -> int:
    out = out or sys.stdout
    config = load_config(args)
    rows = gradcheck_rows(config, load_data(config))
    print(f"{'kind':<10} {'block':<8} {'max_rel_error':>14}  status", file=out)
    ok = True
    for kind, block, err in rows:
        passed = err <= GRADCHECK_TOL
        ok &= passed
        print(f"{kind:<10} {block:<8} {err:>14.3e}  {'ok' if passed else 'FAIL'}", file=out)
    if not rows:
        print("no trainable blocks in the configured kinds", file=out)
    return EXIT_OK if ok else EXIT_NUMERICAL


# --------------------------------------------------------------------------- train / backtest / report


def _echo(config: RunConfig) -> dict:
    """Config recorded with outputs; the output location is left out so reruns elsewhere match."""
    sections = config.to_sections()
    del sections["run"]["output_dir"]
    return sections


def cmd_train(args, out=None) -> int:
    out = out or sys.stdout
    config = load_config(args)
    data = load_data(config)
    e = config.experiment
    setup = prepare_trial(data, e, config.trial)
    dest = Path(config.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    snapshot = []
    with open(dest / "training_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "model", "iteration", "cost", "grad_inf_gamma1", "grad_inf_gamma2",
                    "grad_inf_theta1", "grad_inf_theta2", "gamma1", "gamma2"])
        for kind in e.kinds:
            params, trace = train(setup.train_window, kind, e.cost, setup.train_config, e.constraint_set)
            for rec in trace.records:
                w.writerow([config.trial, kind.value, rec.iteration, repr(rec.cost)]
                           + [repr(rec.grad_norms.get(b, 0.0)) for b in
                              ("gamma1_raw", "gamma2_raw", "theta1_raw", "theta2_raw")]
                           + [repr(rec.gamma1), repr(rec.gamma2)])
            snapshot.append({"trial": config.trial, "model": kind.value, "params": params.to_dict()})
            c = trace.costs
            first, last = (c[0], c[-1]) if c.size else (float("nan"), float("nan"))
            print(f"{kind.value:<10} cost {first:.6g} -> {last:.6g} over {len(trace)} iterations", file=out)
    (dest / "params.json").write_text(json.dumps(
        {"config": _echo(config), "seed": e.seed, "universe": setup.universe.tolist(), "models": snapshot},
        indent=1, sort_keys=True) + "\n")
    print(f"wrote {dest / 'training_curve.csv'} and {dest / 'params.json'}", file=out)
    return EXIT_OK


def _print_report(report, out) -> None:
    print(f"{'model':<10} {'vol':>10} {'sharpe':>10} {'var_vs_nom':>11} {'wins':>6} {'p_value':>9}", file=out)
    for model, agg in report.aggregates.items():
        pct = report.percent_vs_nominal.get(model, {}).get("variance", {})
        sign = report.sign_tests.get(model)
        pct_text = f"{100 * pct['mean']:+.2f}%" if "mean" in pct else "-"
        wins = f"{sign['wins']}/{sign['trials']}" if sign else "-"
        p = f"{sign['p_value']:.3g}" if sign else "-"
        print(f"{model:<10} {agg['vol']['mean']:>10.4f} {agg['sharpe']['mean']:>10.4f} "
              f"{pct_text:>11} {wins:>6} {p:>9}", file=out)


def cmd_backtest(args, out=None) -> int:
    out = out or sys.stdout
    config = load_config(args)
    data = load_data(config)
    e = config.experiment
    results = run_experiment(data, e, workers=config.threads)
    report = write_run(config.output_dir, results, _echo(config), e.seed, e.rolling_window_weeks, e.cost.risk_free)
    _print_report(report, out)
    print(f"wrote {config.output_dir}", file=out)
    return EXIT_OK


def cmd_report(args, out=None) -> int:
    out = out or sys.stdout
    run_dir = Path(load_config(args).output_dir)
    echo_path = run_dir / "config_echo.json"
    if not echo_path.exists():
        raise UsageError(f"missing run output: {echo_path}")
    echo = RunConfig.from_sections(json.loads(echo_path.read_text())["config"])
    e = echo.experiment
    report = report_from_dir(run_dir, e.rolling_window_weeks, e.cost.risk_free)
    _print_report(report, out)
    print(f"wrote {run_dir / 'summary.json'}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--output-dir", metavar="PATH", help="directory for outputs")
    common.add_argument("--seed", type=int, metavar="N", help="root seed")
    common.add_argument("--threads", type=int, metavar="N", help="worker processes for trials")
    common.add_argument("--synthetic", action="store_true", help="use the seeded synthetic market")
    common.add_argument("--kinds", metavar="LIST", help="comma-separated penalty kinds")

    parser = _Parser(prog="penmvo", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    solve = sub.add_parser("solve", parents=[common], help="solve one problem file")
    solve.add_argument("problem", metavar="PROBLEM", help="sectioned CSV problem file")
    solve.add_argument("--eps", type=float, default=1e-10, help="ADMM tolerance (abs and rel)")
    solve.add_argument("--max-iter", type=int, default=50000)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every trainable block")
    sub.add_parser("train", parents=[common], help="train the configured kinds on one trial")
    sub.add_parser("backtest", parents=[common], help="run all trials and kinds and write every output")
    sub.add_parser("report", parents=[common], help="re-aggregate an existing run directory")
    return parser


COMMANDS = {
    "solve": cmd_solve, "gradcheck": cmd_gradcheck, "train": cmd_train,
    "backtest": cmd_backtest, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PenmvoError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
