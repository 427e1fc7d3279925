"""Per-label prompt weights from an entropy-regularized validation log-likelihood."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG_EPS = 1e-6


@dataclass
class LinearOptConfig:
    learning_rate: float = 0.5
    max_iters: int = 5000
    convergence_tol: float = 1e-12
    entropy_coefficient: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.entropy_coefficient < 0:
            raise ValueError("entropy_coefficient must be >= 0")


def softmax(w_raw, mask=None) -> np.ndarray:
    """Max-subtracted softmax; entries where ``mask`` is False get weight 0."""
    z = np.asarray(w_raw, dtype=float)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(w) -> float:
    """Natural-log entropy of a simplex point, with 0 log 0 = 0."""
    w = np.asarray(w, dtype=float)
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def linear_objective(weights, mean_loglik, tau: float = 1.0) -> float:
    w = np.asarray(weights, dtype=float)
    return float(np.dot(w, mean_loglik) + tau * entropy(w))


def mean_log_likelihoods(p_yes, truths, parsed=None, eps: float = LOG_EPS) -> np.ndarray:
    """Per-prompt average of log P(correct answer), clamped at log(eps).

    ``p_yes`` and ``parsed`` are (cases, prompts); failed entries are skipped.
    A prompt with no parsed entries scores log(eps).
    """
    p = np.asarray(p_yes, dtype=float)
    y = np.asarray(truths, dtype=bool)[:, None]
    ok = np.ones_like(p, dtype=bool) if parsed is None else np.asarray(parsed, dtype=bool)
    p_true = np.where(y, p, 1.0 - p)
    ll = np.log(np.maximum(p_true, eps))
    counts = ok.sum(axis=0)
    sums = np.where(ok, ll, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.log(eps))


def optimize_from_loglik(mean_loglik, config: LinearOptConfig | None = None) -> np.ndarray:
    """Gradient ascent on the raw weights, starting from uniform; returns the best iterate."""
    cfg = config or LinearOptConfig()
    ell = np.asarray(mean_loglik, dtype=float)
    tau = cfg.entropy_coefficient
    z = np.zeros_like(ell)
    w = softmax(z)
    best_w, best_val = w, linear_objective(w, ell, tau)
    for _ in range(cfg.max_iters):
        # dL/dw_j = ell_j - tau (log w_j + 1); chain through the softmax Jacobian
        g = ell - tau * (np.log(np.maximum(w, 1e-300)) + 1.0)
        step = w * (g - np.dot(w, g))
        z = z + cfg.learning_rate * step
        w = softmax(z)
        val = linear_objective(w, ell, tau)
        if val > best_val:
            best_w, best_val = w, val
        if np.max(np.abs(step)) < cfg.convergence_tol:
            break
    return best_w


def optimize_linear_weights(p_yes, truths, parsed=None, config: LinearOptConfig | None = None) -> np.ndarray:
    """Fixed weight vector for one label from its validation cases."""
    p = np.asarray(p_yes, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("validation set for linear weights is empty")
    return optimize_from_loglik(mean_log_likelihoods(p, truths, parsed), config)


def weights_to_json(weights: dict[str, Sequence[float]]) -> dict:
    return {k: [float(x) for x in v] for k, v in sorted(weights.items())}
