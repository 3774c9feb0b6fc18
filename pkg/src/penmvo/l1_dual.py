"""L1-penalized QPs solved and differentiated through their box-constrained dual.

Primal::

    minimize    -z'y + 1/2 z'Vz + kappa * ||E z||_1
    subject to  A z = b,  G z <= h

With ``M = [E; A; G]`` and ``nu = (v, eta, lam)`` the dual is the box QP::

    minimize    1/2 nu' (M V^-1 M') nu + nu' q,    q = -M V^-1 y + (0, b, h)
    subject to  -kappa <= v <= kappa,  lam >= 0

and the primal is recovered as ``z = V^-1 (y - M' nu)``. Gradients flow
through the recovery map, the dual QP layer (fixed-point backward), and the
assembly of ``Q_dual`` and ``q_dual``.

The ``*_batch`` functions operate on a leading period axis with ``E``, ``A``,
``b``, ``G`` and ``h`` shared across the batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, FactorizationError, InfeasibleError, InvalidProblemError
from .qp_core import AdmmBatchSolution, AdmmSettings, AdmmSolution, admm_solve_batch
from .qp_grad import _check_eps, fixed_point_backward_batch

__all__ = [
    "L1PenalizedProblem",
    "DualL1Problem",
    "DualSolution",
    "L1Gradients",
    "build_dual",
    "solve_l1_qp",
    "duality_gap",
    "l1_backward",
    "DualBatch",
    "build_dual_batch",
    "solve_l1_batch",
    "l1_backward_batch",
]


def _rows(M, d: int) -> np.ndarray:
    if M is None or np.size(M) == 0:
        return np.zeros((0, d))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != d:
        raise DimensionError(f"constraint matrix has {M.shape[1]} columns, expected {d}")
    return M


def _rhs(x, k: int, name: str) -> np.ndarray:
    if k == 0:
        return np.zeros(0)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (k,):
        raise DimensionError(f"{name} has shape {x.shape}, expected ({k},)")
    return x


@dataclass(frozen=True)
class L1PenalizedProblem:
    V_gamma2: np.ndarray
    y_hat: np.ndarray
    E: np.ndarray | None
    kappa: float
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray

    @classmethod
    def create(cls, V_gamma2, y_hat, E=None, kappa=0.0, A=None, b=None, G=None, h=None):
        V = np.atleast_2d(np.asarray(V_gamma2, dtype=float))
        d = V.shape[0]
        if V.shape != (d, d):
            raise DimensionError("V_gamma2 must be square")
        y = np.atleast_1d(np.asarray(y_hat, dtype=float))
        if y.shape != (d,):
            raise DimensionError(f"y_hat has shape {y.shape}, expected ({d},)")
        if float(kappa) < 0:
            raise InvalidProblemError("kappa must be nonnegative")
        E = None if E is None else _rows(E, d)
        A = _rows(A, d)
        G = _rows(G, d)
        return cls(V, y, E, float(kappa), A, _rhs(b, A.shape[0], "b"), G, _rhs(h, G.shape[0], "h"))

    @property
    def d(self) -> int:
        return self.V_gamma2.shape[0]

    @property
    def M(self) -> np.ndarray:
        parts = [self.A, self.G] if self.E is None else [self.E, self.A, self.G]
        return np.vstack(parts)

    def primal_objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        val = -z @ self.y_hat + 0.5 * z @ self.V_gamma2 @ z
        if self.E is not None:
            val += self.kappa * np.sum(np.abs(self.E @ z))
        return float(val)


@dataclass(frozen=True)
class DualL1Problem:
    Q_dual: np.ndarray
    q_dual: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    block_dims: tuple[int, int, int]
    chol_V: tuple
    Vinv_Mt: np.ndarray
    Vinv_y: np.ndarray


@dataclass(frozen=True)
class DualSolution:
    v_star: np.ndarray
    eta_star: np.ndarray
    lambda_star: np.ndarray
    z_star: np.ndarray
    admm: AdmmSolution

    @property
    def nu(self) -> np.ndarray:
        return np.concatenate([self.v_star, self.eta_star, self.lambda_star])


@dataclass
class L1Gradients:
    grad_V_gamma2: np.ndarray
    grad_y_hat: np.ndarray
    grad_E: np.ndarray | None
    grad_kappa: float | np.ndarray
    grad_A: np.ndarray
    grad_b: np.ndarray
    grad_G: np.ndarray
    grad_h: np.ndarray


def _dual_bounds(kappa: np.ndarray, dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    dE, deq, diq = dims
    B = kappa.shape[0]
    lower = np.concatenate(
        [-kappa[:, None] * np.ones((B, dE)), np.full((B, deq), -np.inf), np.zeros((B, diq))], axis=1
    )
    upper = np.concatenate(
        [kappa[:, None] * np.ones((B, dE)), np.full((B, deq), np.inf), np.full((B, diq), np.inf)], axis=1
    )
    return lower, upper


@dataclass
class DualBatch:
    """Assembled duals for a batch of periods sharing ``E, A, b, G, h``."""

    Q_dual: np.ndarray  # (B, n, n)
    q_dual: np.ndarray  # (B, n)
    lower: np.ndarray
    upper: np.ndarray
    block_dims: tuple[int, int, int]
    M: np.ndarray  # (n, d)
    Vinv: np.ndarray  # (B, d, d)
    Vinv_Mt: np.ndarray  # (B, d, n)
    Vinv_y: np.ndarray  # (B, d)
    chol: np.ndarray  # (B, d, d) lower Cholesky factors
    scale: np.ndarray  # (B, n) diagonal preconditioner used inside the solve

    def scaled(self) -> tuple[np.ndarray, ...]:
        """``(S Q S, S q, lower / s, upper / s)`` with ``S = diag(scale)``."""
        s = self.scale
        return (
            s[:, :, None] * self.Q_dual * s[:, None, :],
            s * self.q_dual,
            self.lower / s,
            self.upper / s,
        )


def build_dual_batch(V, y, E, kappa, A=None, b=None, G=None, h=None) -> DualBatch:
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    B, d = y.shape
    if V.shape != (B, d, d):
        raise DimensionError(f"V has shape {V.shape}, expected {(B, d, d)}")
    E = None if E is None else _rows(E, d)
    A = _rows(A, d)
    G = _rows(G, d)
    b = _rhs(b, A.shape[0], "b")
    h = _rhs(h, G.shape[0], "h")
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (B,)).copy()
    if E is not None and np.any(kappa <= 0):
        raise InvalidProblemError("kappa must be positive when an L1 block is present; use the plain QP path")
    dE = 0 if E is None else E.shape[0]
    dims = (dE, A.shape[0], G.shape[0])
    M = np.vstack([m for m in (E, A, G) if m is not None])
    if M.shape[0] == 0:
        raise InvalidProblemError("dual has no variables: no L1 block and no constraints")

    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("V_gamma2 is not positive definite", block="V_gamma2") from exc
    Linv = np.linalg.inv(L)
    Vinv = np.swapaxes(Linv, 1, 2) @ Linv
    Vinv_Mt = Vinv @ M.T
    Vinv_y = np.matmul(Vinv, y[..., None])[..., 0]
    Q_dual = M @ Vinv_Mt
    Q_dual = 0.5 * (Q_dual + np.swapaxes(Q_dual, 1, 2))
    q_dual = -np.matmul(M, Vinv_y[..., None])[..., 0]
    q_dual[:, dE:] += np.concatenate([b, h])
    lower, upper = _dual_bounds(kappa, dims)
    return DualBatch(Q_dual, q_dual, lower, upper, dims, M, Vinv, Vinv_Mt, Vinv_y, L, _jacobi_scale(Q_dual))


def _jacobi_scale(Q: np.ndarray) -> np.ndarray:
    # Rows of M with tiny norm (small penalty weights) give tiny curvature that
    # stalls ADMM at fixed rho; unit-diagonal scaling removes that spread.
    diag = np.einsum("bii->bi", Q)
    big = np.max(diag, axis=1, keepdims=True)
    ok = diag > 1e-12 * np.maximum(big, 1e-300)
    return np.where(ok, 1.0 / np.sqrt(np.where(ok, diag, 1.0)), 1.0)


@dataclass
class DualBatchSolution:
    nu: np.ndarray  # (B, n)
    z: np.ndarray  # (B, d)
    admm: AdmmBatchSolution
    block_dims: tuple[int, int, int]

    @property
    def v(self) -> np.ndarray:
        return self.nu[:, : self.block_dims[0]]

    @property
    def eta(self) -> np.ndarray:
        dE, deq, _ = self.block_dims
        return self.nu[:, dE : dE + deq]

    @property
    def lam(self) -> np.ndarray:
        dE, deq, _ = self.block_dims
        return self.nu[:, dE + deq :]


def solve_l1_batch(
    dual: DualBatch,
    y: np.ndarray,
    settings: AdmmSettings | None = None,
    warm: AdmmBatchSolution | tuple[np.ndarray, np.ndarray] | None = None,
) -> DualBatchSolution:
    """Solve the assembled duals with ADMM and recover the primal portfolios.

    ``warm`` is a previous batch solution or a ``(z0, mu0)`` pair of dual
    iterates. Unconverged problems are returned as-is with a
    ``RuntimeWarning``; callers inspect ``admm.converged``.
    """
    z0 = mu0 = None
    if isinstance(warm, tuple):
        z0, mu0 = warm
    elif warm is not None:
        z0, mu0 = warm.z_star, warm.mu_star
    if z0 is not None and np.shape(z0) != dual.q_dual.shape:
        z0 = mu0 = None
    s = dual.scale
    if z0 is not None:
        z0 = np.asarray(z0) / s
        mu0 = None if mu0 is None else np.asarray(mu0) * s
    Qs, qs, ls, us = dual.scaled()
    scaled_sol = admm_solve_batch(Qs, qs, None, None, ls, us, settings=settings, z0=z0, mu0=mu0)
    sol = _unscale(scaled_sol, s)
    if not np.all(sol.converged):
        warnings.warn(
            f"dual ADMM did not converge for {int(np.sum(~sol.converged))} problem(s); "
            "returning the last iterate",
            RuntimeWarning,
            stacklevel=2,
        )
    nu = sol.z_star
    r = y - nu @ dual.M
    z = np.matmul(dual.Vinv, r[..., None])[..., 0]
    return DualBatchSolution(nu=nu, z=z, admm=sol, block_dims=dual.block_dims)


def _unscale(sol: AdmmBatchSolution, s: np.ndarray) -> AdmmBatchSolution:
    # nu = s * nu_scaled; bound multipliers transform inversely
    return AdmmBatchSolution(
        z_star=sol.z_star * s,
        z_tilde_star=sol.z_tilde_star * s,
        mu_star=sol.mu_star / s,
        eta_star=sol.eta_star,
        iterations=sol.iterations,
        primal_residual=sol.primal_residual,
        dual_residual=sol.dual_residual,
        converged=sol.converged,
        polished=sol.polished,
        rho=sol.rho,
    )


def l1_backward_batch(
    dual: DualBatch,
    solution: DualBatchSolution,
    dc_dz: np.ndarray,
    tikhonov_eps: float = 1e-6,
    refine_steps: int = 3,
) -> dict[str, np.ndarray]:
    """Gradients on ``V, y, M, kappa, b, h`` (batched; ``M`` blocks split by caller)."""
    _check_eps(tikhonov_eps)
    g = np.asarray(dc_dz, dtype=float)
    z = solution.z
    nu = solution.nu
    M = dual.M
    dE, deq, diq = dual.block_dims

    # recovery map z = V^-1 (y - M' nu)
    w_bar = np.matmul(dual.Vinv, g[..., None])[..., 0]
    grad_y = w_bar.copy()
    outer = w_bar[:, :, None] * z[:, None, :]
    grad_V = -0.5 * (outer + np.swapaxes(outer, 1, 2))
    grad_M = -nu[:, :, None] * w_bar[:, None, :]
    nu_bar = -(w_bar @ M.T)

    # dual box-QP layer, differentiated in the preconditioned coordinates the
    # forward solve used; the scale is a constant since z does not depend on it
    adm = solution.admm
    s = dual.scale
    Qs, _, ls, us = dual.scaled()
    gd = fixed_point_backward_batch(
        Qs, None, adm.z_star / s, adm.mu_star * s, adm.eta_star, ls, us,
        adm.rho, nu_bar * s, tikhonov_eps, refine_steps,
    )
    gQ = s[:, :, None] * gd["Q"] * s[:, None, :]
    gq = s * gd["p"]
    gl, gu = gd["lower"] / s, gd["upper"] / s

    # Q_dual = M V^-1 M'
    VMt = dual.Vinv_Mt
    grad_M += 2.0 * gQ @ np.swapaxes(VMt, 1, 2)
    grad_V -= VMt @ gQ @ np.swapaxes(VMt, 1, 2)
    # q_dual = -M V^-1 y + (0, b, h)
    grad_M -= gq[:, :, None] * dual.Vinv_y[:, None, :]
    t = np.matmul(VMt, gq[..., None])[..., 0]
    outer = t[:, :, None] * dual.Vinv_y[:, None, :]
    grad_V += 0.5 * (outer + np.swapaxes(outer, 1, 2))
    grad_y -= t
    grad_V = 0.5 * (grad_V + np.swapaxes(grad_V, 1, 2))

    grad_kappa = np.sum(gu[:, :dE], axis=1) - np.sum(gl[:, :dE], axis=1)
    return {
        "V": grad_V,
        "y": grad_y,
        "M": grad_M,
        "E": grad_M[:, :dE],
        "A": grad_M[:, dE : dE + deq],
        "G": grad_M[:, dE + deq :],
        "b": gq[:, dE : dE + deq],
        "h": gq[:, dE + deq :],
        "kappa": grad_kappa,
    }


# single-problem API -------------------------------------------------------


def _as_batch(problem: L1PenalizedProblem) -> DualBatch:
    return build_dual_batch(
        problem.V_gamma2[None], problem.y_hat[None], problem.E, problem.kappa,
        problem.A, problem.b, problem.G, problem.h,
    )


def build_dual(problem: L1PenalizedProblem) -> DualL1Problem:
    """Assemble the box-constrained dual of an L1-penalized QP."""
    batch = _as_batch(problem)
    chol = scipy.linalg.cho_factor(problem.V_gamma2, lower=True)
    return DualL1Problem(
        Q_dual=batch.Q_dual[0],
        q_dual=batch.q_dual[0],
        lower=batch.lower[0],
        upper=batch.upper[0],
        block_dims=batch.block_dims,
        chol_V=chol,
        Vinv_Mt=batch.Vinv_Mt[0],
        Vinv_y=batch.Vinv_y[0],
    )


def _split(problem: L1PenalizedProblem, nu: np.ndarray):
    dE = 0 if problem.E is None else problem.E.shape[0]
    deq = problem.A.shape[0]
    return nu[:dE], nu[dE : dE + deq], nu[dE + deq :]


def solve_l1_qp(
    problem: L1PenalizedProblem,
    settings: AdmmSettings | None = None,
    warm_start: DualSolution | None = None,
) -> DualSolution:
    dual = build_dual(problem)
    batch = _as_batch(problem)
    warm = None if warm_start is None else AdmmBatchSolution.stack([warm_start.admm])
    sol = solve_l1_batch(batch, problem.y_hat[None], settings, warm)
    nu = sol.nu[0]
    v, eta, lam = _split(problem, nu)
    z = scipy.linalg.cho_solve(dual.chol_V, problem.y_hat - problem.M.T @ nu)
    return DualSolution(v_star=v, eta_star=eta, lambda_star=lam, z_star=z, admm=sol.admm[0])


def duality_gap(problem: L1PenalizedProblem, solution: DualSolution) -> float:
    """Primal objective at ``z*`` minus the dual function at ``(v*, eta*, lam*)``."""
    if problem.E is not None and problem.kappa <= 0:
        raise InvalidProblemError("duality gap undefined for kappa = 0 with an L1 block")
    z = solution.z_star
    if problem.A.shape[0] and np.max(np.abs(problem.A @ z - problem.b)) > 1e-6:
        raise InfeasibleError("z* violates the equality constraints")
    if problem.G.shape[0] and np.max(problem.G @ z - problem.h) > 1e-6:
        raise InfeasibleError("z* violates the inequality constraints")
    if solution.v_star.size and np.max(np.abs(solution.v_star)) > problem.kappa + 1e-8:
        raise InfeasibleError("v* lies outside the dual box")
    if solution.lambda_star.size and np.min(solution.lambda_star) < -1e-8:
        raise InfeasibleError("lambda* is negative")

    nu = solution.nu
    r = problem.y_hat - problem.M.T @ nu
    chol = scipy.linalg.cho_factor(problem.V_gamma2, lower=True)
    dual_value = -0.5 * r @ scipy.linalg.cho_solve(chol, r) - solution.eta_star @ problem.b - solution.lambda_star @ problem.h
    return problem.primal_objective(z) - float(dual_value)


def l1_backward(
    problem: L1PenalizedProblem,
    solution: DualSolution,
    dc_dz,
    tikhonov_eps: float = 1e-6,
    refine_steps: int = 3,
) -> L1Gradients:
    g = np.asarray(dc_dz, dtype=float)
    if g.shape != (problem.d,):
        raise DimensionError(f"dc_dz has shape {g.shape}, expected ({problem.d},)")
    batch = _as_batch(problem)
    bsol = DualBatchSolution(
        nu=solution.nu[None],
        z=solution.z_star[None],
        admm=AdmmBatchSolution.stack([solution.admm]),
        block_dims=batch.block_dims,
    )
    out = l1_backward_batch(batch, bsol, g[None], tikhonov_eps, refine_steps)
    for key in ("V", "y", "M", "kappa"):
        if not np.all(np.isfinite(out[key])):
            raise FactorizationError("non-finite gradient accumulation", block=key)
    return L1Gradients(
        grad_V_gamma2=out["V"][0],
        grad_y_hat=out["y"][0],
        grad_E=None if problem.E is None else out["E"][0],
        grad_kappa=float(out["kappa"][0]),
        grad_A=out["A"][0],
        grad_b=out["b"][0],
        grad_G=out["G"][0],
        grad_h=out["h"][0],
    )
