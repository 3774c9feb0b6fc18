"""Penalty models: parameter transforms, structure matrices and V assembly.

A penalty is ``kappa * ||E z||_1 + 1/2 * l2_weight * ||D z||^2`` with
``kappa = alpha * gamma1`` and ``l2_weight = (1 - alpha) * gamma2``. The
quadratic part is folded into the risk matrix,

    V_gamma2 = delta * V_hat + l2_weight * D'D,

so each period's decision problem is a QP in ``V_gamma2`` plus an optional
L1 term handled by the dual layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DimensionError, InvalidProblemError

__all__ = [
    "PenaltyKind",
    "PenaltyParams",
    "PenaltyStructures",
    "init_params",
    "transform_params",
    "build_structures",
    "assemble_v_gamma2",
    "l2_penalty_backward",
    "raw_gradients",
    "psd_sqrt",
]

GAMMA_INIT = -4.0
SQRT_FLOOR = 1e-10


class PenaltyKind(Enum):
    NOMINAL = "nominal"
    L2 = "l2"
    L2_COV = "l2-cov"
    L1 = "l1"
    ELASTIC_NET = "en"
    L2_P = "l2-p"
    L2_COV_P = "l2-cov-p"
    L1_P = "l1-p"
    ELASTIC_NET_P = "en-p"

    @classmethod
    def parse(cls, name: str) -> "PenaltyKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown penalty kind {name!r}; expected one of {valid}") from None

    @property
    def has_l1(self) -> bool:
        return self in (PenaltyKind.L1, PenaltyKind.ELASTIC_NET, PenaltyKind.L1_P, PenaltyKind.ELASTIC_NET_P)

    @property
    def has_l2(self) -> bool:
        return self in (
            PenaltyKind.L2, PenaltyKind.L2_COV, PenaltyKind.ELASTIC_NET,
            PenaltyKind.L2_P, PenaltyKind.L2_COV_P, PenaltyKind.ELASTIC_NET_P,
        )

    @property
    def trains_theta1(self) -> bool:
        return self in (PenaltyKind.L1_P, PenaltyKind.ELASTIC_NET_P)

    @property
    def trains_theta2(self) -> bool:
        return self in (PenaltyKind.L2_P, PenaltyKind.L2_COV_P, PenaltyKind.ELASTIC_NET_P)

    @property
    def needs_covariance(self) -> bool:
        return self in (PenaltyKind.L2_COV, PenaltyKind.L2_COV_P)

    @property
    def default_alpha(self) -> float:
        if self in (PenaltyKind.ELASTIC_NET, PenaltyKind.ELASTIC_NET_P):
            return 0.5
        return 1.0 if self.has_l1 else 0.0

    @property
    def trainable(self) -> tuple[str, ...]:
        names = []
        if self.has_l1:
            names.append("gamma1_raw")
        if self.has_l2:
            names.append("gamma2_raw")
        if self.trains_theta1:
            names.append("theta1_raw")
        if self.trains_theta2:
            names.append("theta2_raw")
        return tuple(names)


@dataclass(frozen=True)
class PenaltyParams:
    """Unconstrained (raw) penalty parameters; ``alpha`` is fixed."""

    gamma1_raw: float = GAMMA_INIT
    gamma2_raw: float = GAMMA_INIT
    theta1_raw: np.ndarray | None = None
    theta2_raw: np.ndarray | None = None
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def get(self, name: str):
        return getattr(self, name)

    def updated(self, **values) -> "PenaltyParams":
        return replace(self, **values)

    def to_dict(self) -> dict:
        def enc(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "gamma1_raw": float(self.gamma1_raw),
            "gamma2_raw": float(self.gamma2_raw),
            "theta1_raw": enc(self.theta1_raw),
            "theta2_raw": enc(self.theta2_raw),
            "alpha": float(self.alpha),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PenaltyParams":
        def dec(x):
            return None if x is None else np.asarray(x, dtype=float)

        return cls(
            float(data["gamma1_raw"]), float(data["gamma2_raw"]),
            dec(data.get("theta1_raw")), dec(data.get("theta2_raw")), float(data["alpha"]),
        )


@dataclass(frozen=True)
class PenaltyStructures:
    E: np.ndarray | None
    D: np.ndarray | None
    kappa: float
    l2_weight: float
    alpha: float = 0.0
    gamma2: float = 0.0
    extras: dict = field(default_factory=dict)


def init_params(
    kind: PenaltyKind,
    d_z: int,
    d_x: int | None = None,
    rng: np.random.Generator | None = None,
    alpha: float | None = None,
) -> PenaltyParams:
    """Initial raw parameters: gammas at -4 and theta drawn U[0, 1]."""
    rng = np.random.default_rng(0) if rng is None else rng
    theta1 = rng.uniform(0.0, 1.0, size=d_z) if kind.trains_theta1 else None
    theta2 = None
    if kind is PenaltyKind.L2_COV_P:
        if d_x is None:
            raise DimensionError("l2-cov-p needs the feature dimension d_x")
        theta2 = rng.uniform(0.0, 1.0, size=(d_x, d_z))
    elif kind.trains_theta2:
        theta2 = rng.uniform(0.0, 1.0, size=d_z)
    # the mixing weight only matters when both terms are present
    mixed = kind.has_l1 and kind.has_l2
    a = alpha if (mixed and alpha is not None) else kind.default_alpha
    return PenaltyParams(GAMMA_INIT, GAMMA_INIT, theta1, theta2, float(a))


def transform_params(raw: PenaltyParams):
    """Effective ``(gamma1, gamma2, theta1, theta2)``: exp on gammas, relu on thetas."""
    relu = lambda x: None if x is None else np.maximum(np.asarray(x, dtype=float), 0.0)  # noqa: E731
    return float(np.exp(raw.gamma1_raw)), float(np.exp(raw.gamma2_raw)), relu(raw.theta1_raw), relu(raw.theta2_raw)


def psd_sqrt(W, floor: float = SQRT_FLOOR) -> np.ndarray:
    """Symmetric square root of a PSD matrix with eigenvalues floored at ``floor``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (W + W.T))
    root = (vecs * np.sqrt(np.maximum(vals, floor))) @ vecs.T
    return 0.5 * (root + root.T)


def build_structures(
    kind: PenaltyKind,
    params: PenaltyParams,
    d_z: int,
    beta_hat: np.ndarray | None = None,
    W_sqrt: np.ndarray | None = None,
) -> PenaltyStructures:
    """Penalty matrices ``E``, ``D`` and effective weights for ``kind``."""
    g1, g2, th1, th2 = transform_params(params)
    alpha = params.alpha
    if kind.needs_covariance and W_sqrt is None:
        raise InvalidProblemError(f"{kind.value} requires the feature covariance square root")
    E = D = None
    if kind in (PenaltyKind.L1, PenaltyKind.ELASTIC_NET):
        E = np.eye(d_z)
    elif kind.trains_theta1:
        if th1 is None or th1.shape != (d_z,):
            raise DimensionError("theta1 must be a vector of length d_z")
        E = np.diag(th1)
    if kind in (PenaltyKind.L2, PenaltyKind.ELASTIC_NET):
        D = np.eye(d_z)
    elif kind is PenaltyKind.L2_COV:
        if beta_hat is None:
            raise InvalidProblemError("l2-cov requires the regression coefficients")
        D = np.asarray(W_sqrt, dtype=float) @ np.asarray(beta_hat, dtype=float)
    elif kind is PenaltyKind.L2_COV_P:
        D = np.asarray(W_sqrt, dtype=float) @ th2
    elif kind.trains_theta2:
        if th2 is None or th2.shape != (d_z,):
            raise DimensionError("theta2 must be a vector of length d_z")
        D = np.diag(th2)
    if D is not None and D.shape[1] != d_z:
        raise DimensionError(f"D has {D.shape[1]} columns, expected {d_z}")
    kappa = alpha * g1 if E is not None else 0.0
    l2w = (1.0 - alpha) * g2 if D is not None else 0.0
    return PenaltyStructures(E, D, float(kappa), float(l2w), float(alpha), g2)


def assemble_v_gamma2(V_hat, delta: float, structures: PenaltyStructures) -> np.ndarray:
    """``delta * V_hat + l2_weight * D'D``; ``V_hat`` may carry leading batch axes."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    V = delta * np.asarray(V_hat, dtype=float)
    if structures.D is not None:
        D = structures.D
        if D.shape[1] != V.shape[-1]:
            raise DimensionError("D does not match the asset dimension")
        V = V + structures.l2_weight * (D.T @ D)
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    if np.min(np.linalg.eigvalsh(V)) <= 0:
        raise InvalidProblemError("assembled V_gamma2 is not positive definite")
    return V


def l2_penalty_backward(grad_V_gamma2, structures: PenaltyStructures, alpha: float, gamma2: float):
    """Gradients of the cost with respect to ``gamma2`` and ``D`` through the L2 term."""
    G = np.asarray(grad_V_gamma2, dtype=float)
    D = structures.D
    if D is None:
        return 0.0, None
    if G.shape != (D.shape[1], D.shape[1]):
        raise DimensionError("grad_V_gamma2 does not match D")
    w = 1.0 - alpha
    grad_gamma2 = w * float(np.sum(G * (D.T @ D)))
    grad_D = gamma2 * w * (D @ G + D @ G.T)
    return grad_gamma2, grad_D


def raw_gradients(
    kind: PenaltyKind,
    params: PenaltyParams,
    structures: PenaltyStructures,
    grad_V_gamma2: np.ndarray,
    grad_E: np.ndarray | None = None,
    grad_kappa: float = 0.0,
    W_sqrt: np.ndarray | None = None,
) -> dict[str, np.ndarray | float]:
    """Chain layer gradients down to the raw trainable parameters of ``kind``.

    ``grad_V_gamma2``, ``grad_E`` and ``grad_kappa`` are totals over periods.
    """
    g1, g2, _, _ = transform_params(params)
    out: dict[str, np.ndarray | float] = {}
    grad_gamma2, grad_D = l2_penalty_backward(grad_V_gamma2, structures, params.alpha, g2)
    if kind.has_l1:
        out["gamma1_raw"] = params.alpha * float(grad_kappa) * g1
    if kind.has_l2:
        out["gamma2_raw"] = grad_gamma2 * g2
    if kind.trains_theta1:
        mask = (np.asarray(params.theta1_raw) > 0).astype(float)
        gE = np.zeros_like(mask) if grad_E is None else np.diag(grad_E)
        out["theta1_raw"] = gE * mask
    if kind.trains_theta2:
        mask = (np.asarray(params.theta2_raw) > 0).astype(float)
        if kind is PenaltyKind.L2_COV_P:
            out["theta2_raw"] = (np.asarray(W_sqrt).T @ grad_D) * mask
        else:
            out["theta2_raw"] = np.diag(grad_D) * mask
    return out
