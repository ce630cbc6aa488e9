"""The q-fair objective family and its curvature bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS_FLOOR = 1e-10


@dataclass(frozen=True)
class QConfig:
    q: float = 0.0
    L: float = 1.0
    eps_floor: float = EPS_FLOOR

    def __post_init__(self):
        if not self.q >= 0:
            raise ValueError("q must be >= 0")
        if not self.L > 0:
            raise ValueError("L must be > 0")
        if not self.eps_floor > 0:
            raise ValueError("eps_floor must be > 0")


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> float:
    return float(np.sum(weights * values))


def federated_objective(p, losses) -> float:
    """Plain weighted risk ``sum_k p_k F_k``."""
    return _weighted_sum(np.asarray(p, dtype=np.float64), np.asarray(losses, dtype=np.float64))


def qffl_value(q: float, p, losses) -> float:
    """``sum_k p_k / (q + 1) * F_k ** (q + 1)``.

    With ``q = 0`` both factors are bit-identical to ``p`` and ``F``, so this
    equals :func:`federated_objective` exactly.
    """
    p = np.asarray(p, dtype=np.float64)
    F = np.asarray(losses, dtype=np.float64)
    if p.shape != F.shape:
        raise ValueError(f"p and losses differ in shape: {p.shape} vs {F.shape}")
    if q < 0:
        raise ValueError("q must be >= 0")
    if np.any(F < 0):
        raise ValueError("losses must be non-negative")
    return _weighted_sum(p / (q + 1.0), F ** (q + 1.0))


def lipschitz_estimate(L: float, q: float, f_value: float, grad_norm_sq: float,
                       eps_floor: float = EPS_FLOOR) -> float:
    """Local curvature bound ``L f^q + q f^(q-1) |grad f|^2`` of ``f^(q+1)/(q+1)``.

    For ``0 < q < 1`` the loss is floored at ``eps_floor`` because
    ``f^(q-1)`` blows up at zero.
    """
    if q == 0:
        return float(L)
    f = max(f_value, eps_floor) if q < 1 else f_value
    return float(L * f**q + q * f ** (q - 1) * grad_norm_sq)


def alpha_fairness_utility(alpha: float, x: float) -> float:
    if x <= 0:
        raise ValueError("utility is defined for x > 0")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 1:
        return math.log(x)
    return x ** (1 - alpha) / (1 - alpha)
