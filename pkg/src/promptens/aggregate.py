"""Weighted combination of per-prompt probabilities into a decision and an uncertainty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METHODS = ("baseline", "uniform", "linear", "mlp", "agent")


class AllFailedError(ValueError):
    """Every ensemble member failed to parse; there is nothing to aggregate."""


@dataclass(frozen=True)
class EnsemblePrediction:
    report_id: str
    label_name: str
    method: str
    p_hat: float
    decision: str
    uncertainty: float
    trail: dict = field(default_factory=dict)


def check_simplex(weights, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weight vector must be a non-empty 1-d sequence")
    if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"not a simplex point: {w}")
    return w


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one prompt")
    return np.full(n, 1.0 / n)


def posterior_predictive(weights, p_yes, mask=None) -> float:
    """Weighted mean of yes-probabilities, renormalizing over ``mask`` (parsed entries)."""
    w = np.asarray(weights, dtype=float)
    p = np.asarray(p_yes, dtype=float)
    if w.shape != p.shape:
        raise ValueError(f"length mismatch: {w.shape} weights vs {p.shape} probabilities")
    if mask is not None:
        w = np.where(np.asarray(mask, dtype=bool), w, 0.0)
    # correctly rounded sums keep exact ties (e.g. a 3-3 vote) at exactly 0.5
    total = math.fsum(w)
    if total <= 0:
        raise AllFailedError("no parsed responses carry weight")
    p_hat = math.fsum(w * p) / total
    return min(max(p_hat, 0.0), 1.0)


def binary_entropy_uncertainty(p_hat: float) -> float:
    """Base-2 binary entropy, so the value lies in [0, 1]."""
    if p_hat <= 0.0 or p_hat >= 1.0:
        return 0.0
    q = 1.0 - p_hat
    return float(-(p_hat * np.log2(p_hat) + q * np.log2(q)))


def mean_entropy_uncertainty(weights, p_yes, mask=None) -> float:
    """Weighted average of per-prompt binary entropies (alternative reading)."""
    w = np.asarray(weights, dtype=float)
    if mask is not None:
        w = np.where(np.asarray(mask, dtype=bool), w, 0.0)
    if w.sum() <= 0:
        raise AllFailedError("no parsed responses carry weight")
    w = w / w.sum()
    return float(sum(wi * binary_entropy_uncertainty(pi) for wi, pi in zip(w, p_yes)))


def decide(p_hat: float) -> str:
    # ties go to No
    return "Yes" if p_hat > 0.5 else "No"


def all_failed_prediction(report_id: str, label: str, method: str, trail: dict | None = None) -> EnsemblePrediction:
    trail = dict(trail or {})
    trail["all_failed"] = True
    return EnsemblePrediction(report_id, label, method, 0.5, "No", 1.0, trail)


def aggregate(
    method: str,
    responses: Sequence,
    weights,
    uncertainty_mode: str = "mixture",
) -> EnsemblePrediction:
    """Combine one case's responses under ``weights``.

    Failed responses get zero weight and the rest are renormalized. If every
    response failed the prediction is No with uncertainty 1.0.
    """
    if not responses:
        raise ValueError("no responses to aggregate")
    w = np.asarray(weights, dtype=float)
    if len(w) != len(responses):
        raise ValueError(f"{len(w)} weights for {len(responses)} responses")
    first = responses[0]
    p = np.array([r.p_yes for r in responses])
    mask = np.array([r.parse_status != "failed" for r in responses])
    trail = {
        "prompts": [
            {"template_id": r.template_id, "p_yes": float(r.p_yes), "weight": float(wi), "parsed": bool(m)}
            for r, wi, m in zip(responses, w, mask)
        ]
    }
    try:
        p_hat = posterior_predictive(w, p, mask)
    except AllFailedError:
        return all_failed_prediction(first.report_id, first.label_name, method, trail)
    if uncertainty_mode == "mixture":
        u = binary_entropy_uncertainty(p_hat)
    elif uncertainty_mode == "mean_entropy":
        u = mean_entropy_uncertainty(w, p, mask)
    else:
        raise ValueError(f"unknown uncertainty mode {uncertainty_mode!r}")
    return EnsemblePrediction(first.report_id, first.label_name, method, p_hat, decide(p_hat), u, trail)
