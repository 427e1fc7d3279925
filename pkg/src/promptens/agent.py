"""Judge-model aggregation: five confidence categories mapped to uncertainty levels."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregate import EnsemblePrediction, aggregate, all_failed_prediction, decide, uniform_weights
from .gateway import Gateway, RequestKey, iter_json_objects
from .prompts import build_agent_prompt

JUDGE_TEMPLATE_ID = "judge"


class VerdictParseError(ValueError):
    pass


class ConfidenceCategory(enum.Enum):
    DefinitelyYes = "Definitely Yes"
    LikelyYes = "Likely Yes"
    DefinitelyNo = "Definitely No"
    LikelyNo = "Likely No"
    Uncertain = "Uncertain"


_BY_TEXT = {c.value.lower(): c for c in ConfidenceCategory}

UNCERTAINTY = {
    ConfidenceCategory.DefinitelyYes: 0.0,
    ConfidenceCategory.DefinitelyNo: 0.0,
    ConfidenceCategory.LikelyYes: 0.5,
    ConfidenceCategory.LikelyNo: 0.5,
    ConfidenceCategory.Uncertain: 1.0,
}

POLARITY = {
    ConfidenceCategory.DefinitelyYes: "Yes",
    ConfidenceCategory.LikelyYes: "Yes",
    ConfidenceCategory.DefinitelyNo: "No",
    ConfidenceCategory.LikelyNo: "No",
}


@dataclass(frozen=True)
class AgentVerdict:
    category: ConfidenceCategory
    explanation: str
    raw_text: str


def parse_verdict(raw_text: str) -> AgentVerdict:
    """First JSON object with a ``Decision`` key naming one of the five categories."""
    for _, _, obj in iter_json_objects(raw_text):
        if "Decision" not in obj:
            continue
        decision = obj["Decision"]
        if not isinstance(decision, str):
            break
        category = _BY_TEXT.get(" ".join(decision.strip().lower().split()))
        if category is None:
            raise VerdictParseError(f"unrecognized decision {decision!r}")
        explanation = obj.get("Explanation", "")
        return AgentVerdict(category, explanation if isinstance(explanation, str) else str(explanation), raw_text)
    raise VerdictParseError(f"no verdict JSON in: {raw_text[:80]!r}")


def category_to_uncertainty(category: ConfidenceCategory) -> float:
    return UNCERTAINTY[category]


def resolve_uncertain(responses: Sequence) -> str:
    """Decision for an Uncertain verdict: mean yes-probability of parsed responses."""
    parsed = [r.p_yes for r in responses if r.parse_status != "failed"]
    if not parsed:
        return "No"
    return decide(float(np.mean(parsed)))


def agent_aggregate(gateway: Gateway, responses: Sequence, label: str) -> EnsemblePrediction:
    """Ask the judge for a verdict on one case's ensemble answers.

    If no verdict can be parsed after the gateway's retries, the case falls
    back to uniform-weight entropy aggregation and is flagged in the trail.
    """
    first = responses[0]
    if not any(r.parse_status != "failed" for r in responses):
        return all_failed_prediction(first.report_id, label, "agent")
    prompt = build_agent_prompt(responses, label)
    raw_texts = []
    for attempt in range(gateway.config.max_retries + 1):
        raw = gateway.query(prompt, RequestKey(first.report_id, label, JUDGE_TEMPLATE_ID, attempt))
        raw_texts.append(raw.text)
        try:
            verdict = parse_verdict(raw.text)
        except VerdictParseError:
            continue
        cat = verdict.category
        decision = POLARITY.get(cat) or resolve_uncertain(responses)
        mean_p = float(np.mean([r.p_yes for r in responses if r.parse_status != "failed"]))
        trail = {
            "verdict": cat.value,
            "verdict_explanation": verdict.explanation,
            "mean_p_yes": mean_p,
            "prompts": [{"template_id": r.template_id, "p_yes": float(r.p_yes)} for r in responses],
        }
        return EnsemblePrediction(first.report_id, label, "agent", mean_p, decision,
                                  category_to_uncertainty(cat), trail)
    fallback = aggregate("agent", responses, uniform_weights(len(responses)))
    trail = dict(fallback.trail, agent_fallback=True, judge_raw=raw_texts[-1] if raw_texts else "")
    return EnsemblePrediction(fallback.report_id, label, "agent", fallback.p_hat, fallback.decision,
                              fallback.uncertainty, trail)
