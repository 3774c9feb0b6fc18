"""Quadratic programs with equality constraints and box bounds.

The canonical form solved here is::

    minimize    1/2 z'Qz + p'z
    subject to  A z = b,  lower <= z <= upper

Infinite bounds are plain IEEE infinities. The ADMM solver works on a leading
batch axis so that many independent problems (one per rebalance period) are
advanced together; :func:`admm_solve` is the single-problem entry point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    DivergenceError,
    FactorizationError,
    InvalidProblemError,
)

__all__ = [
    "QpProblem",
    "AdmmSettings",
    "AdmmSolution",
    "AdmmBatchSolution",
    "project_box",
    "kkt_reference_solve",
    "admm_solve",
    "admm_solve_batch",
    "objective_value",
]


def _vec(x, n: int | None = None, fill: float = 0.0, name: str = "vector") -> np.ndarray:
    if x is None:
        if n is None:
            raise DimensionError(f"{name} is required")
        return np.full(n, fill, dtype=float)
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


@dataclass(frozen=True)
class QpProblem:
    """Immutable QP in canonical form. Use :meth:`create` for defaults."""

    Q: np.ndarray
    p: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise DimensionError(f"Q must be square, got shape {Q.shape}")
        p = _vec(self.p, n, name="p")
        A = np.asarray(self.A, dtype=float)
        if A.size == 0:
            A = np.zeros((0, n))
        A = np.atleast_2d(A)
        if A.shape[1] != n:
            raise DimensionError(f"A has {A.shape[1]} columns, expected {n}")
        b = _vec(self.b if np.size(self.b) else np.zeros(0), A.shape[0], name="b")
        lower = _vec(self.lower, n, name="lower")
        upper = _vec(self.upper, n, name="upper")

        scale = max(1.0, float(np.max(np.abs(Q))) if Q.size else 1.0)
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-10 * scale:
            raise InvalidProblemError("Q is not symmetric")
        Qs = 0.5 * (Q + Q.T)
        if n and np.linalg.eigvalsh(Qs)[0] < -1e-8 * scale:
            raise InvalidProblemError("Q is not positive semidefinite")
        if np.any(lower > upper):
            bad = np.flatnonzero(lower > upper)
            raise InvalidProblemError(f"lower > upper at indices {bad.tolist()}")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise InvalidProblemError("bounds contain NaN")
        if A.shape[0]:
            if A.shape[0] > n or np.linalg.matrix_rank(A) < A.shape[0]:
                raise InvalidProblemError("A does not have full row rank")

        for name, value in (("Q", Qs), ("p", p), ("A", A), ("b", b), ("lower", lower), ("upper", upper)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def create(cls, Q, p, A=None, b=None, lower=None, upper=None) -> "QpProblem":
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n = Q.shape[0]
        if A is None:
            A = np.zeros((0, n))
            b = np.zeros(0)
        return cls(
            Q=Q,
            p=p,
            A=A,
            b=b if b is not None else np.zeros(np.atleast_2d(A).shape[0]),
            lower=_vec(lower, n, -np.inf, "lower"),
            upper=_vec(upper, n, np.inf, "upper"),
        )

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    def with_(self, **changes) -> "QpProblem":
        return replace(self, **changes)


@dataclass(frozen=True)
class AdmmSettings:
    """ADMM parameters.

    ``polish`` runs an active-set refinement after the iterations terminate so
    that the returned point satisfies the KKT conditions to machine precision.
    """

    rho: float = 1.0
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 10000
    polish: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be a positive integer")


@dataclass(frozen=True)
class AdmmSolution:
    z_star: np.ndarray
    z_tilde_star: np.ndarray
    mu_star: np.ndarray
    eta_star: np.ndarray
    lambda_minus: np.ndarray
    lambda_plus: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool
    rho: float = 1.0
    polished: bool = False

    def kkt_residual(self, problem: QpProblem) -> float:
        """Infinity norm of the stationarity residual Qz + p + A'eta + lam+ - lam-."""
        r = (
            problem.Q @ self.z_star
            + problem.p
            + problem.A.T @ self.eta_star
            + self.lambda_plus
            - self.lambda_minus
        )
        return float(np.max(np.abs(r), initial=0.0))


@dataclass
class AdmmBatchSolution:
    """Stacked solutions; arrays carry a leading batch axis."""

    z_star: np.ndarray
    z_tilde_star: np.ndarray
    mu_star: np.ndarray
    eta_star: np.ndarray
    iterations: np.ndarray
    primal_residual: np.ndarray
    dual_residual: np.ndarray
    converged: np.ndarray
    polished: np.ndarray
    rho: float = 1.0
    lambda_minus: np.ndarray = field(init=False)
    lambda_plus: np.ndarray = field(init=False)

    def __post_init__(self):
        scaled = self.rho * self.mu_star
        self.lambda_minus = -np.minimum(scaled, 0.0)
        self.lambda_plus = np.maximum(scaled, 0.0)

    def __len__(self) -> int:
        return self.z_star.shape[0]

    def __getitem__(self, i: int) -> AdmmSolution:
        return AdmmSolution(
            z_star=self.z_star[i].copy(),
            z_tilde_star=self.z_tilde_star[i].copy(),
            mu_star=self.mu_star[i].copy(),
            eta_star=self.eta_star[i].copy(),
            lambda_minus=self.lambda_minus[i].copy(),
            lambda_plus=self.lambda_plus[i].copy(),
            iterations=int(self.iterations[i]),
            primal_residual=float(self.primal_residual[i]),
            dual_residual=float(self.dual_residual[i]),
            converged=bool(self.converged[i]),
            rho=self.rho,
            polished=bool(self.polished[i]),
        )

    @classmethod
    def stack(cls, solutions: list[AdmmSolution]) -> "AdmmBatchSolution":
        return cls(
            z_star=np.stack([s.z_star for s in solutions]),
            z_tilde_star=np.stack([s.z_tilde_star for s in solutions]),
            mu_star=np.stack([s.mu_star for s in solutions]),
            eta_star=np.stack([s.eta_star for s in solutions]),
            iterations=np.array([s.iterations for s in solutions]),
            primal_residual=np.array([s.primal_residual for s in solutions]),
            dual_residual=np.array([s.dual_residual for s in solutions]),
            converged=np.array([s.converged for s in solutions]),
            polished=np.array([s.polished for s in solutions]),
            rho=solutions[0].rho,
        )


def project_box(x, lower, upper) -> np.ndarray:
    """Euclidean projection onto ``{lower <= z <= upper}`` (elementwise clamp)."""
    x = np.asarray(x, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if x.shape[-1:] != lower.shape[-1:] or x.shape[-1:] != upper.shape[-1:]:
        raise DimensionError(
            f"shape mismatch: x {x.shape}, lower {lower.shape}, upper {upper.shape}"
        )
    return np.maximum(lower, np.minimum(x, upper))


def objective_value(problem: QpProblem, z) -> float:
    z = np.asarray(z, dtype=float)
    if z.shape != (problem.n,):
        raise DimensionError(f"z has shape {z.shape}, expected ({problem.n},)")
    return float(0.5 * z @ problem.Q @ z + problem.p @ z)


def kkt_reference_solve(Q, p, A=None, b=None) -> tuple[np.ndarray, np.ndarray]:
    """Dense solve of the equality-constrained QP optimality system.

    Returns ``(z, eta)`` with ``[Q A'; A 0][z; eta] = [-p; b]``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Q.shape[0]
    p = _vec(p, n, name="p")
    if A is None or np.size(A) == 0:
        try:
            c, low = scipy.linalg.cho_factor(0.5 * (Q + Q.T))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("Q block is singular", block="Q") from exc
        return scipy.linalg.cho_solve((c, low), -p), np.zeros(0)

    A = np.atleast_2d(np.asarray(A, dtype=float))
    m = A.shape[0]
    if A.shape[1] != n:
        raise DimensionError(f"A has {A.shape[1]} columns, expected {n}")
    b = _vec(b, m, name="b")
    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    if np.linalg.cond(K) > 1e14:
        raise FactorizationError("KKT matrix [Q A'; A 0] is singular", block="KKT")
    sol = scipy.linalg.solve(K, np.concatenate([-p, b]), assume_a="sym")
    return sol[:n], sol[n:]


# first in-loop polish attempt; later attempts double the iteration count
POLISH_FIRST = 25


def _batch_inputs(Q, p, A, b, lower, upper):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p[None, :]
    B, n = p.shape
    Q = np.asarray(Q, dtype=float)
    Q = np.broadcast_to(Q, (B, n, n))
    if A is None or np.size(A) == 0:
        A = np.zeros((B, 0, n))
        b = np.zeros((B, 0))
    else:
        A = np.asarray(A, dtype=float)
        if A.ndim == 2:
            A = np.broadcast_to(A, (B,) + A.shape)
        b = np.broadcast_to(np.asarray(b, dtype=float), (B, A.shape[1]))
    lower = np.broadcast_to(-np.inf if lower is None else np.asarray(lower, dtype=float), (B, n))
    upper = np.broadcast_to(np.inf if upper is None else np.asarray(upper, dtype=float), (B, n))
    if A.shape[-1] != n:
        raise DimensionError(f"A has {A.shape[-1]} columns, expected {n}")
    if np.any(lower > upper):
        raise InvalidProblemError("lower > upper")
    return Q, p, A, b, lower, upper


def _bmv(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(M, x[..., None])[..., 0]


def admm_solve_batch(
    Q,
    p,
    A=None,
    b=None,
    lower=None,
    upper=None,
    settings: AdmmSettings | None = None,
    z0: np.ndarray | None = None,
    mu0: np.ndarray | None = None,
) -> AdmmBatchSolution:
    """Solve a stack of box/equality QPs with ADMM.

    Each iteration performs the linear solve with ``[Q + rho I, A'; A, 0]``,
    projects ``z_tilde + mu`` onto the box and updates the scaled dual ``mu``.
    The KKT matrix is inverted once per problem and reused. Problems leave the
    active set as soon as they satisfy the stopping rule.
    """
    settings = settings or AdmmSettings()
    Q, p, A, b, lower, upper = _batch_inputs(Q, p, A, b, lower, upper)
    B, n = p.shape
    m = A.shape[1]
    rho = settings.rho

    z = np.zeros((B, n)) if z0 is None else np.array(z0, dtype=float).reshape(B, n)
    mu = np.zeros((B, n)) if mu0 is None else np.array(mu0, dtype=float).reshape(B, n)
    z_tilde = z.copy()
    eta = np.zeros((B, m))
    iters = np.zeros(B, dtype=int)
    r_prim = np.full(B, np.inf)
    r_dual = np.full(B, np.inf)
    converged = np.zeros(B, dtype=bool)
    polished = np.zeros(B, dtype=bool)

    idx = np.arange(B)

    K = np.zeros((B, n + m, n + m))
    K[:, :n, :n] = Q + rho * np.eye(n)
    K[:, :n, n:] = np.swapaxes(A, 1, 2)
    K[:, n:, :n] = A
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("ADMM KKT matrix is singular", block="KKT") from exc
    if not np.all(np.isfinite(Kinv)):
        raise FactorizationError("ADMM KKT inverse is not finite", block="KKT")

    Ki, pi, bi, li, ui = Kinv, p, b, lower, upper
    zi, mui = z.copy(), mu.copy()
    rhs = np.empty((B, n + m))
    rhs[:, n:] = b
    next_polish = POLISH_FIRST
    for k in range(1, int(settings.max_iter) + 1):
        rhs_i = rhs[: len(idx)]
        rhs_i[:, :n] = rho * (zi - mui) - pi
        rhs_i[:, n:] = bi
        sol = _bmv(Ki, rhs_i)
        zt = sol[:, :n]
        z_new = np.maximum(li, np.minimum(zt + mui, ui))
        mu_new = mui + zt - z_new
        rp = np.max(np.abs(zt - z_new), axis=1, initial=0.0)
        rd = rho * np.max(np.abs(z_new - zi), axis=1, initial=0.0)
        zi, mui = z_new, mu_new
        if k % 10 == 0 and not np.all(np.isfinite(zi)):
            raise DivergenceError(f"ADMM iterate became non-finite at iteration {k}")
        tol_p = settings.eps_abs + settings.eps_rel * np.max(np.abs(zi), axis=1, initial=0.0)
        tol_d = settings.eps_abs + settings.eps_rel * rho * np.max(np.abs(mui), axis=1, initial=0.0)
        done = (rp <= tol_p) & (rd <= tol_d)
        early = np.zeros_like(done)
        if settings.polish and k == next_polish and not done.all():
            # try to finish slow problems exactly once their active set has settled
            next_polish *= 2
            cand = ~done
            pz, pzt, pmu, peta, ok = _polish(
                Q[idx[cand]], pi[cand], A[idx[cand]], bi[cand], li[cand], ui[cand],
                zi[cand], zt[cand], mui[cand], sol[cand, n:], rho,
            )
            if ok.any():
                early[np.flatnonzero(cand)[ok]] = True
                sel_c = np.flatnonzero(cand)[ok]
                zi[sel_c], mui[sel_c] = pz[ok], pmu[ok]
                zt = zt.copy()
                zt[sel_c] = pzt[ok]
                sol = sol.copy()
                sol[sel_c, n:] = peta[ok]
        finished = done | early
        last = k == int(settings.max_iter)
        if finished.any() or last:
            sel = np.ones_like(finished) if last else finished
            tgt = idx[sel]
            z[tgt] = zi[sel]
            mu[tgt] = mui[sel]
            z_tilde[tgt] = zt[sel]
            eta[tgt] = sol[sel, n:]
            iters[tgt] = k
            r_prim[tgt] = np.where(early[sel], 0.0, rp[sel])
            r_dual[tgt] = np.where(early[sel], 0.0, rd[sel])
            converged[tgt] = finished[sel]
            polished[tgt] = early[sel]
            keep = ~sel
            if not keep.any():
                break
            idx = idx[keep]
            Ki, pi, bi, li, ui = Ki[keep], pi[keep], bi[keep], li[keep], ui[keep]
            zi, mui = zi[keep], mui[keep]

    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(mu))):
        raise DivergenceError("ADMM produced non-finite iterates")

    if settings.polish:
        rest = ~polished
        if rest.any():
            r = np.flatnonzero(rest)
            pz, pzt, pmu, peta, ok = _polish(
                Q[r], p[r], A[r], b[r], lower[r], upper[r], z[r], z_tilde[r], mu[r], eta[r], rho
            )
            z[r], z_tilde[r], mu[r], eta[r] = pz, pzt, pmu, peta
            polished[r] = ok
    return AdmmBatchSolution(
        z_star=z,
        z_tilde_star=z_tilde,
        mu_star=mu,
        eta_star=eta,
        iterations=iters,
        primal_residual=r_prim,
        dual_residual=r_dual,
        converged=converged | polished,
        polished=polished,
        rho=rho,
    )


def _polish(Q, p, A, b, lower, upper, z, z_tilde, mu, eta, rho, refine: int = 10, passes: int = 4):
    """Active-set refinement of ADMM iterates.

    The active set is read off ``z + mu`` (the argument of the projection).
    The reduced KKT system is solved by iterative refinement on a slightly
    regularized matrix, starting from the ADMM point, so rank-deficient
    curvature (non-unique solutions) is handled without leaving the ADMM
    solution's neighbourhood. Free coordinates that drift past a bound along
    such a null direction are clamped and the system is re-solved, for up to
    ``passes`` rounds. A candidate is kept only if it is feasible and its
    bound multipliers carry the right sign.
    """
    B, n = z.shape
    arg = z + mu
    at_lower = arg <= lower
    at_upper = arg >= upper
    ok = np.zeros(B, dtype=bool)
    out = None
    for _ in range(passes):
        cand = _polish_candidate(Q, p, A, b, lower, upper, z, eta, at_lower, at_upper, refine)
        if cand is None:
            break
        zc, etac, rmu, ok_new, below, above = cand
        if out is None:
            out = [zc, etac, rmu, at_lower.copy(), at_upper.copy()]
        take = ok_new & ~ok
        for arr, val in zip(out, (zc, etac, rmu, at_lower, at_upper)):
            arr[take] = val[take]
        ok |= ok_new
        retry = ~ok & (below | above).any(axis=1)
        if not retry.any():
            break
        at_lower = at_lower | (retry[:, None] & below)
        at_upper = at_upper | (retry[:, None] & above)
    if out is None:
        return z, z_tilde, mu, eta, ok

    zc, etac, rmu, lo_set, up_set = out
    zc = np.clip(zc, lower, upper)
    # a clamped coordinate whose multiplier rounds to the wrong side is treated as free
    rmu = np.where(lo_set, np.minimum(rmu, 0.0), np.where(up_set, np.maximum(rmu, 0.0), 0.0))
    okc = ok[:, None]
    return (
        np.where(okc, zc, z),
        np.where(okc, zc, z_tilde),
        np.where(okc, rmu / rho, mu),
        np.where(okc, etac, eta),
        ok,
    )


def _polish_candidate(Q, p, A, b, lower, upper, z, eta, at_lower, at_upper, refine):
    """Solve the reduced KKT system for a guessed active set and test it."""
    B, n = z.shape
    m = A.shape[1]
    free = ~(at_lower | at_upper)
    fixed = np.where(at_lower, lower, np.where(at_upper, upper, 0.0))

    At = np.swapaxes(A, 1, 2)
    Km = np.zeros((B, n + m, n + m))
    Km[:, :n, :n] = np.where(free[:, :, None], Q, 0.0)
    Km[:, :n, n:] = np.where(free[:, :, None], At, 0.0)
    Km[:, n:, :n] = A
    diag = np.arange(n)
    Km[:, diag, diag] += np.where(free, 0.0, 1.0)
    rhs = np.concatenate([np.where(free, -p, fixed), b], axis=1)

    scale = 1.0 + np.max(np.abs(Q), axis=(1, 2))
    delta = 1e-9 * scale
    Kreg = Km.copy()
    Kreg[:, diag, diag] += np.where(free, delta[:, None], 0.0)
    eq = np.arange(n, n + m)
    Kreg[:, eq, eq] -= delta[:, None]
    try:
        Kreg_inv = np.linalg.inv(Kreg)
    except np.linalg.LinAlgError:
        return None

    x = np.concatenate([np.where(free, z, fixed), eta], axis=1)
    for _ in range(refine):
        x = x + _bmv(Kreg_inv, rhs - _bmv(Km, x))

    zc = x[:, :n]
    etac = x[:, n:]
    grad = _bmv(Q, zc) + p + _bmv(At, etac)
    rmu = np.where(free, 0.0, -grad)

    zscale = 1.0 + np.max(np.abs(zc), axis=1)
    gscale = 1.0 + np.maximum(np.max(np.abs(p), axis=1), np.max(np.abs(_bmv(Q, zc)), axis=1))
    tol_z = 1e-9 * zscale[:, None]
    tol_g = 1e-8 * gscale[:, None]
    below = free & (zc < lower - tol_z)
    above = free & (zc > upper + tol_z)
    ok = np.all(np.isfinite(x), axis=1)
    ok &= ~np.any(below | above, axis=1)
    ok &= np.all(~at_lower | (rmu <= tol_g), axis=1)
    ok &= np.all(~at_upper | (rmu >= -tol_g), axis=1)
    stat = np.max(np.abs(np.where(free, grad, 0.0)), axis=1, initial=0.0)
    ok &= stat <= 1e-10 * gscale
    if m:
        ok &= np.max(np.abs(_bmv(A, zc) - b), axis=1) <= 1e-10 * (1.0 + np.max(np.abs(b), axis=1))
    return zc, etac, rmu, ok, below, above


def admm_solve(
    problem: QpProblem,
    settings: AdmmSettings | None = None,
    warm_start: AdmmSolution | None = None,
) -> AdmmSolution:
    """Solve one QP; ``warm_start`` seeds ``z`` and ``mu`` from a previous solution."""
    z0 = mu0 = None
    if warm_start is not None:
        if warm_start.z_star.shape != (problem.n,):
            raise DimensionError("warm start has the wrong dimension")
        z0 = warm_start.z_star[None, :]
        mu0 = warm_start.mu_star[None, :]
    batch = admm_solve_batch(
        problem.Q[None],
        problem.p[None],
        problem.A if problem.n_eq else None,
        problem.b,
        problem.lower,
        problem.upper,
        settings=settings,
        z0=z0,
        mu0=mu0,
    )
    return batch[0]
