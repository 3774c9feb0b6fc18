"""Backward passes for QP layers.

Two modes are provided:

* :func:`kkt_backward` differentiates the KKT conditions of a general QP with
  equality and inequality rows ``G z <= h`` (OptNet style).
* :func:`admm_fixed_point_backward` differentiates the fixed point of the
  ADMM iteration for equality + box QPs, including gradients with respect to
  the box bounds.

All gradients use the convention of the canonical form ``1/2 z'Qz + p'z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FactorizationError, NotConvergedError
from .qp_core import AdmmBatchSolution, AdmmSettings, AdmmSolution, QpProblem

__all__ = [
    "KktBackwardResult",
    "QpGradients",
    "InequalityQp",
    "kkt_backward",
    "kkt_backward_box",
    "admm_fixed_point_backward",
    "fixed_point_backward_batch",
    "box_as_inequalities",
]

TIKHONOV_RANGE = (1e-8, 1e-4)


@dataclass(frozen=True)
class KktBackwardResult:
    d_z: np.ndarray
    d_lambda: np.ndarray
    d_eta: np.ndarray


@dataclass
class QpGradients:
    grad_Q: np.ndarray
    grad_p: np.ndarray
    grad_A: np.ndarray
    grad_b: np.ndarray
    grad_G: np.ndarray | None = None
    grad_h: np.ndarray | None = None
    grad_lower: np.ndarray | None = None
    grad_upper: np.ndarray | None = None
    adjoint: KktBackwardResult | None = None

    def scaled(self, alpha: float) -> "QpGradients":
        def s(x):
            return None if x is None else alpha * x

        return QpGradients(
            s(self.grad_Q), s(self.grad_p), s(self.grad_A), s(self.grad_b),
            s(self.grad_G), s(self.grad_h), s(self.grad_lower), s(self.grad_upper),
        )


@dataclass(frozen=True)
class InequalityQp:
    """QP data with general inequality rows: min 1/2 z'Qz + p'z, Az = b, Gz <= h."""

    Q: np.ndarray
    p: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray

    @classmethod
    def create(cls, Q, p, A=None, b=None, G=None, h=None) -> "InequalityQp":
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n = Q.shape[0]
        A = np.zeros((0, n)) if A is None or np.size(A) == 0 else np.atleast_2d(np.asarray(A, dtype=float))
        G = np.zeros((0, n)) if G is None or np.size(G) == 0 else np.atleast_2d(np.asarray(G, dtype=float))
        b = np.zeros(0) if A.shape[0] == 0 else np.atleast_1d(np.asarray(b, dtype=float))
        h = np.zeros(0) if G.shape[0] == 0 else np.atleast_1d(np.asarray(h, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if p.shape != (n,) or A.shape[1] != n or G.shape[1] != n:
            raise DimensionError("inconsistent QP dimensions")
        if b.shape != (A.shape[0],) or h.shape != (G.shape[0],):
            raise DimensionError("right-hand sides do not match constraint rows")
        return cls(Q, p, A, b, G, h)


def kkt_backward(
    z_star,
    lambda_star,
    eta_star,
    qp: InequalityQp,
    dc_dz,
) -> QpGradients:
    """Gradients of a scalar cost through the KKT system of ``qp``.

    Solves the transposed differential KKT system

        [Q   G'diag(lam)  A'] [dz  ]     [dc/dz]
        [G   diag(Gz-h)   0 ] [dlam] = - [  0  ]
        [A   0            0 ] [deta]     [  0  ]

    and maps the adjoint to gradients on every QP input.
    """
    z = np.asarray(z_star, dtype=float)
    lam = np.asarray(lambda_star, dtype=float)
    eta = np.asarray(eta_star, dtype=float)
    g = np.asarray(dc_dz, dtype=float)
    n, m, k = qp.Q.shape[0], qp.A.shape[0], qp.G.shape[0]
    if z.shape != (n,) or g.shape != (n,) or lam.shape != (k,) or eta.shape != (m,):
        raise DimensionError("solution or cotangent does not match the QP dimensions")

    slack = qp.G @ z - qp.h
    K = np.zeros((n + k + m, n + k + m))
    K[:n, :n] = qp.Q
    K[:n, n : n + k] = qp.G.T * lam[None, :]
    K[:n, n + k :] = qp.A.T
    K[n : n + k, :n] = qp.G
    K[n : n + k, n : n + k] = np.diag(slack)
    K[n + k :, :n] = qp.A
    rhs = np.zeros(n + k + m)
    rhs[:n] = g
    if np.linalg.cond(K) > 1e13:
        raise FactorizationError(
            "differential KKT matrix is singular (strict complementarity fails); "
            "use admm_fixed_point_backward with Tikhonov regularization instead",
            block="differential-KKT",
        )
    sol = -np.linalg.solve(K, rhs)
    dz, dlam, deta = sol[:n], sol[n : n + k], sol[n + k :]

    grad_Q = 0.5 * (np.outer(dz, z) + np.outer(z, dz))
    return QpGradients(
        grad_Q=grad_Q,
        grad_p=dz.copy(),
        grad_A=np.outer(deta, z) + np.outer(eta, dz),
        grad_b=-deta,
        grad_G=np.outer(lam * dlam, z) + np.outer(lam, dz),
        grad_h=-lam * dlam,
        adjoint=KktBackwardResult(d_z=dz, d_lambda=dlam, d_eta=deta),
    )


def box_as_inequalities(problem: QpProblem) -> tuple[InequalityQp, np.ndarray, np.ndarray]:
    """Rewrite finite bounds as rows of ``G z <= h``.

    Returns the inequality QP together with the variable indices of the upper
    rows (``z_i <= u_i``) followed by the lower rows (``-z_i <= -l_i``).
    """
    n = problem.n
    up = np.flatnonzero(np.isfinite(problem.upper))
    lo = np.flatnonzero(np.isfinite(problem.lower))
    eye = np.eye(n)
    G = np.vstack([eye[up], -eye[lo]]) if (up.size + lo.size) else np.zeros((0, n))
    h = np.concatenate([problem.upper[up], -problem.lower[lo]])
    qp = InequalityQp(problem.Q, problem.p, problem.A, problem.b, G, h)
    return qp, up, lo


def kkt_backward_box(problem: QpProblem, solution: AdmmSolution, dc_dz) -> QpGradients:
    """KKT-mode gradients for an equality + box QP solved by ADMM.

    Finite bounds become inequality rows; bound multipliers are taken from the
    ADMM solution and the ``h`` gradients are mapped back to the bounds.
    """
    qp, up, lo = box_as_inequalities(problem)
    lam = np.concatenate([solution.lambda_plus[up], solution.lambda_minus[lo]])
    grads = kkt_backward(solution.z_star, lam, solution.eta_star, qp, dc_dz)
    gl = np.zeros(problem.n)
    gu = np.zeros(problem.n)
    gu[up] = grads.grad_h[: up.size]
    gl[lo] = -grads.grad_h[up.size :]
    grads.grad_lower = gl
    grads.grad_upper = gu
    return grads


def _check_eps(tikhonov_eps: float) -> None:
    lo, hi = TIKHONOV_RANGE
    if not (lo <= tikhonov_eps <= hi):
        raise ValueError(f"tikhonov_eps must lie in [{lo:g}, {hi:g}], got {tikhonov_eps:g}")


def fixed_point_backward_batch(
    Q: np.ndarray,
    A: np.ndarray | None,
    z: np.ndarray,
    mu: np.ndarray,
    eta: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    rho: float,
    dc_dz: np.ndarray,
    tikhonov_eps: float = 1e-6,
    refine_steps: int = 3,
) -> dict[str, np.ndarray]:
    """Batched fixed-point backward pass.

    Arrays carry a leading batch axis ``B``. The system matrix is regularized
    by ``tikhonov_eps * I`` before inversion; ``refine_steps`` rounds of
    iterative refinement against the unregularized matrix then remove the
    regularization bias on well-posed directions. Returns a dict with keys
    ``Q, p, A, b, lower, upper``.
    """
    B, n = z.shape
    Q = np.broadcast_to(Q, (B, n, n))
    if A is None or np.size(A) == 0:
        A = np.zeros((B, 0, n))
    else:
        A = np.broadcast_to(A, (B,) + np.shape(A)[-2:])
    m = A.shape[1]
    lower = np.broadcast_to(lower, (B, n))
    upper = np.broadcast_to(upper, (B, n))
    g = np.asarray(dc_dz, dtype=float).reshape(B, n)

    arg = z + mu
    # strict inequalities: a tie with a bound counts as clamped
    free = ((lower < arg) & (arg < upper)).astype(float)
    At = np.swapaxes(A, 1, 2)

    M = np.zeros((B, n + m, n + m))
    M[:, :n, :n] = free[:, :, None] * (Q + rho * np.eye(n))
    M[:, :n, n:] = free[:, :, None] * At
    M[:, n:, :n] = A
    diag = np.arange(n)
    M[:, diag, diag] -= rho * (2.0 * free - 1.0)
    rhs = np.concatenate([-free * g, np.zeros((B, m))], axis=1)

    Mreg = M + tikhonov_eps * np.eye(n + m)
    try:
        Minv = np.linalg.inv(Mreg)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("fixed-point system is singular", block="fixed-point") from exc
    x = np.matmul(Minv, rhs[..., None])[..., 0]
    for _ in range(refine_steps):
        r = rhs - np.matmul(M, x[..., None])[..., 0]
        x = x + np.matmul(Minv, r[..., None])[..., 0]
    if not np.all(np.isfinite(x)):
        raise FactorizationError("fixed-point backward solve is not finite", block="fixed-point")
    dz = x[:, :n]
    deta = x[:, n:]

    grad_Q = 0.5 * (dz[:, :, None] * z[:, None, :] + z[:, :, None] * dz[:, None, :])
    grad_A = deta[:, :, None] * z[:, None, :] + eta[:, :, None] * dz[:, None, :]

    scaled_mu = rho * mu
    mu_tilde = np.where(mu != 0.0, scaled_mu, rho)
    resid = -g - np.matmul(Q, dz[..., None])[..., 0] - np.matmul(At, deta[..., None])[..., 0]
    d_lambda = resid / mu_tilde
    lam_minus = -np.minimum(scaled_mu, 0.0)
    lam_plus = np.maximum(scaled_mu, 0.0)
    return {
        "Q": grad_Q,
        "p": dz,
        "A": grad_A,
        "b": -deta,
        "lower": lam_minus * d_lambda,
        "upper": -lam_plus * d_lambda,
    }


def admm_fixed_point_backward(
    solution: AdmmSolution,
    problem: QpProblem,
    settings: AdmmSettings | None,
    dc_dz,
    tikhonov_eps: float = 1e-6,
    refine_steps: int = 3,
) -> QpGradients:
    """Gradients of a scalar cost through a converged ADMM solution."""
    _check_eps(tikhonov_eps)
    if not solution.converged:
        raise NotConvergedError("fixed-point backward requires a converged forward solution")
    rho = settings.rho if settings is not None else solution.rho
    g = np.asarray(dc_dz, dtype=float)
    if g.shape != (problem.n,):
        raise DimensionError(f"dc_dz has shape {g.shape}, expected ({problem.n},)")
    out = fixed_point_backward_batch(
        problem.Q[None],
        problem.A[None] if problem.n_eq else None,
        solution.z_star[None],
        solution.mu_star[None],
        solution.eta_star[None],
        problem.lower[None],
        problem.upper[None],
        rho,
        g[None],
        tikhonov_eps,
        refine_steps,
    )
    return QpGradients(
        grad_Q=out["Q"][0],
        grad_p=out["p"][0],
        grad_A=out["A"][0],
        grad_b=out["b"][0],
        grad_lower=out["lower"][0],
        grad_upper=out["upper"][0],
    )


def fixed_point_backward_solution(
    sol: AdmmBatchSolution,
    Q: np.ndarray,
    A: np.ndarray | None,
    lower: np.ndarray,
    upper: np.ndarray,
    dc_dz: np.ndarray,
    tikhonov_eps: float = 1e-6,
    refine_steps: int = 3,
) -> dict[str, np.ndarray]:
    """Convenience wrapper taking a batched ADMM solution."""
    _check_eps(tikhonov_eps)
    return fixed_point_backward_batch(
        Q, A, sol.z_star, sol.mu_star, sol.eta_star, lower, upper, sol.rho,
        dc_dz, tikhonov_eps, refine_steps,
    )
