"""Class-distribution estimate from output-layer row norms, and the WDR penalty.

The estimate is ``p_est[j] = |theta_j| / sum_k |theta_k|`` where ``theta_j`` is
row ``j`` of the output weight matrix (bias excluded). WDR adds
``lam * |p - p_est|_2`` to the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError
from .nn import GradientSet, ModelParams, RegularizerHook

DEFAULT_EPSILON = 1e-9


@dataclass(frozen=True)
class WdrConfig:
    lam: float = 0.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError(f"epsilon must be in (0, 1e-6], got {self.epsilon}")


def row_norms(params: ModelParams) -> np.ndarray:
    return np.linalg.norm(params.final_weights, axis=1)


def estimate_distribution(params: ModelParams) -> np.ndarray:
    norms = row_norms(params)
    total = norms.sum()
    if not total > 0:
        raise EstimationError("output layer weights are all zero")
    return norms / total


def estimate_or_uniform(params: ModelParams) -> tuple[np.ndarray, bool]:
    """Estimate, or 1/K when the output layer is all zero. Second value flags the fallback."""
    try:
        return estimate_distribution(params), False
    except EstimationError:
        k = params.num_classes
        return np.full(k, 1.0 / k), True


def wdr_penalty(params: ModelParams, target: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(target, dtype=np.float64) - estimate_distribution(params)))


def wdr_gradient(params: ModelParams, target: np.ndarray, cfg: WdrConfig) -> np.ndarray:
    """Gradient of ``lam * |p - p_est|`` with respect to the output weight matrix.

    Chain rule through the norm ratio:
        dOmega/ds_j = [(p_est_j - p_j) - sum_k (p_est_k - p_k) p_est_k] / (Omega * S)
        ds_j/dtheta_j = theta_j / s_j
    with s_j the row norms and S their sum. Zero where Omega or s_j is below epsilon.
    """
    theta = params.final_weights
    grad = np.zeros_like(theta)
    if cfg.lam == 0:
        return grad
    s = np.linalg.norm(theta, axis=1)
    total = s.sum()
    if not total > 0:
        raise EstimationError("output layer weights are all zero")
    est = s / total
    diff = est - np.asarray(target, dtype=np.float64)
    omega = float(np.linalg.norm(diff))
    if omega < cfg.epsilon:
        return grad
    d_s = (diff - diff @ est) / (omega * total)
    live = s >= cfg.epsilon
    grad[live] = cfg.lam * (d_s[live] / s[live])[:, None] * theta[live]
    return grad


def make_wdr_hook(target: np.ndarray, cfg: WdrConfig) -> RegularizerHook:
    target = np.asarray(target, dtype=np.float64)

    def hook(params: ModelParams) -> tuple[float, GradientSet]:
        grads = params.zeros_like()
        if cfg.lam == 0:
            return 0.0, grads
        _, b_last = grads.layers[-1]
        grads.layers[-1] = (wdr_gradient(params, target, cfg), b_last)
        return cfg.lam * wdr_penalty(params, target), grads

    return hook
