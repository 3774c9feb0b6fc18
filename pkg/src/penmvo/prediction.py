"""Linear factor prediction layer and rolling covariance estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InvalidProblemError

__all__ = [
    "RegressionModel",
    "MomentEstimates",
    "fit_beta",
    "predict_moments",
    "predict_moments_batch",
    "rolling_covariance",
    "floor_eigenvalues",
]

RESIDUAL_FLOOR = 1e-8
EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class RegressionModel:
    beta: np.ndarray  # (d_x, d_y)
    residual_var: np.ndarray  # (d_y,)
    intercept: np.ndarray  # (d_y,)

    @property
    def d_x(self) -> int:
        return self.beta.shape[0]

    @property
    def d_y(self) -> int:
        return self.beta.shape[1]


@dataclass(frozen=True)
class MomentEstimates:
    y_hat: np.ndarray
    V_hat: np.ndarray
    W_hat: np.ndarray


def floor_eigenvalues(S, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize and shift the diagonal so the smallest eigenvalue is at least ``floor``.

    A diagonal shift leaves off-diagonal entries untouched; the shift is zero
    whenever the matrix already clears the floor. Works on stacks of matrices.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    lo = np.linalg.eigvalsh(S)[..., 0]
    shift = np.maximum(floor - lo, 0.0)
    if not np.any(shift):
        return S
    return S + shift[..., None, None] * np.eye(S.shape[-1])


def _collinear_columns(Xc: np.ndarray, tol: float) -> list[int]:
    _, s, vt = np.linalg.svd(Xc, full_matrices=True)
    null = vt[np.sum(s > tol):]
    return sorted(int(i) for i in np.flatnonzero(np.any(np.abs(null) > 1e-8, axis=0)))


def fit_beta(X, Y, intercept: bool = True) -> RegressionModel:
    """Ordinary least squares of ``Y`` on ``X``, optionally with an intercept.

    ``residual_var`` is the per-column mean squared residual (divisor m).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    m, d_x = X.shape
    if Y.shape[0] != m:
        raise DimensionError(f"X has {m} rows but Y has {Y.shape[0]}")
    if m <= d_x + int(intercept):
        raise InvalidProblemError(f"need more than {d_x + int(intercept)} observations, got {m}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise InvalidProblemError("regression inputs contain non-finite values")

    Xc = X - X.mean(axis=0) if intercept else X
    Yc = Y - Y.mean(axis=0) if intercept else Y
    s = np.linalg.svd(Xc, compute_uv=False)
    tol = max(m, d_x) * np.finfo(float).eps * (s[0] if s.size and s[0] > 0 else 1.0)
    if s.size == 0 or s[-1] <= tol * 1e3 or s[0] == 0:
        cols = _collinear_columns(Xc, tol * 1e3)
        raise InvalidProblemError(f"design matrix is rank deficient; collinear columns: {cols}")
    beta, *_ = np.linalg.lstsq(Xc, Yc, rcond=None)
    icpt = Y.mean(axis=0) - X.mean(axis=0) @ beta if intercept else np.zeros(Y.shape[1])
    resid = Y - X @ beta - icpt
    return RegressionModel(beta=beta, residual_var=np.mean(resid**2, axis=0), intercept=icpt)


def predict_moments(model: RegressionModel, x, W_hat) -> MomentEstimates:
    """Mean ``beta'x + intercept`` and covariance ``beta'W beta + F``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    W = np.atleast_2d(np.asarray(W_hat, dtype=float))
    if x.shape != (model.d_x,) or W.shape != (model.d_x, model.d_x):
        raise DimensionError("feature vector or covariance does not match the model")
    out = predict_moments_batch(model, x[None], W[None])
    return MomentEstimates(out.y_hat[0], out.V_hat[0], W)


def predict_moments_batch(model: RegressionModel, X, W_hat) -> MomentEstimates:
    """Vectorized ``predict_moments`` over rows of ``X`` and a stack of ``W_hat``."""
    X = np.asarray(X, dtype=float)
    W = np.asarray(W_hat, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.d_x or W.shape != (X.shape[0], model.d_x, model.d_x):
        raise DimensionError("features or covariances do not match the model")
    y_hat = X @ model.beta + model.intercept
    B = model.beta
    F = np.diag(np.maximum(model.residual_var, RESIDUAL_FLOOR))
    V = np.einsum("xi,txw,wj->tij", B, W, B) + F
    return MomentEstimates(y_hat, floor_eigenvalues(V), W)


def rolling_covariance(series, window: int, floor: float = EIG_FLOOR) -> np.ndarray:
    """Trailing-window sample covariances.

    Entry ``j`` of the result covers rows ``j .. j + window - 1``; the divisor
    is ``window - 1`` and each window is de-meaned separately.
    """
    S = np.asarray(series, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if window < 2:
        raise ValueError("window must be at least 2")
    if S.shape[0] < window:
        raise InvalidProblemError(f"need at least {window} rows of history, got {S.shape[0]}")
    win = sliding_window_view(S, window, axis=0)  # (T, k, window)
    dev = win - win.mean(axis=2, keepdims=True)
    cov = np.einsum("tiw,tjw->tij", dev, dev) / (window - 1)
    return floor_eigenvalues(cov, floor)
