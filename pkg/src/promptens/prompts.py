"""Ensemble prompt templates and the judge prompt builder."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

SLOT_RE = re.compile(r"\{(label|report)\}")

CATEGORY_NAMES = ("Definitely Yes", "Likely Yes", "Definitely No", "Likely No", "Uncertain")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    body: str

    def __post_init__(self):
        for slot in ("label", "report"):
            n = self.body.count("{" + slot + "}")
            if n != 1:
                raise PromptError(
                    f"template {self.template_id}: slot {{{slot}}} must appear exactly once, found {n}"
                )


def load_prompt_set(path: str | Path) -> tuple[PromptTemplate, ...]:
    """Read a JSON array of ``{template_id, body}`` objects."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return _from_json(raw)


def _from_json(raw) -> tuple[PromptTemplate, ...]:
    if not isinstance(raw, list) or not raw:
        raise PromptError("template file must hold a non-empty JSON array")
    templates = tuple(PromptTemplate(int(t["template_id"]), t["body"]) for t in raw)
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise PromptError(f"duplicate template ids: {ids}")
    return templates


def builtin_prompt_set() -> tuple[PromptTemplate, ...]:
    """The six default extraction prompts, in their fixed order."""
    text = resources.files("promptens").joinpath("data/prompts_default.json").read_text(encoding="utf-8")
    return _from_json(json.loads(text))


def render_prompt(template: PromptTemplate, label_name: str, report_text: str) -> str:
    """Fill ``{label}`` and ``{report}`` in one left-to-right pass.

    Slot-like text inside the substituted values is never re-expanded.
    """
    if not report_text:
        raise PromptError("report text is empty")
    values = {"label": label_name, "report": report_text}
    found = set(m.group(1) for m in SLOT_RE.finditer(template.body))
    if found != {"label", "report"}:
        raise PromptError(f"template {template.template_id} is missing slots: {sorted({'label', 'report'} - found)}")
    return SLOT_RE.sub(lambda m: values[m.group(1)], template.body)


def build_agent_prompt(responses: Sequence, label_name: str) -> str:
    """Judge prompt listing every parsed answer with its explanation.

    ``responses`` are objects with ``answer``, ``explanation`` and ``parse_status``;
    failed entries are left out.
    """
    usable = [r for r in responses if r.parse_status != "failed"]
    if not usable:
        raise PromptError("agent prompt needs at least one parsed response")
    lines = [
        f"You are reviewing answers produced by a language model to the question of whether "
        f"a radiology report indicates that the patient has {label_name}. The same question was "
        f"asked {len(usable)} times using differently worded prompts. Each answer is 'Yes' or 'No' "
        f"and comes with an explanation.",
        "",
        "Answers:",
    ]
    for k, r in enumerate(usable, start=1):
        lines.append(f"- Answer {k}: {json.dumps(r.answer)}")
        lines.append(f"  Explanation {k}: {json.dumps(r.explanation, ensure_ascii=False)}")
    lines += [
        "",
        "Evaluate the consistency of the answers, the clarity of their explanations, and the degree "
        "of ambiguity. Then classify the final decision into exactly one of these five categories: "
        + ", ".join(f'"{c}"' for c in CATEGORY_NAMES)
        + ".",
        'Return only a single valid JSON object with this exact shape: {"Decision": "str", "Explanation": "str"}',
    ]
    return "\n".join(lines)
