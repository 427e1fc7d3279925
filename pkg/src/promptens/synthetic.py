"""Seeded synthetic report corpora for demos and golden tests."""

from __future__ import annotations

import numpy as np

from .corpus import Dataset, RadiologyReport

DEFAULT_LABELS = {
    "Ileum comb sign": 0.12,
    "Ileum inflammation": 0.30,
    "Ileum pre-stenotic dilation": 0.08,
    "Ileum stenosis": 0.15,
    "Ileum wall enhancement": 0.22,
    "Ileum wall thickness": 0.28,
    "Rectum wall thickness": 0.07,
    "Sigmoid comb sign": 0.06,
}

_INTRO = (
    "MR enterography with oral contrast.",
    "Technique: MRE, T2 and post-gadolinium sequences.",
    "בדיקת MRE עם חומר ניגוד.",
    "Follow-up study for known Crohn's disease.",
)


def _sentence(label: str, code: int, rng: np.random.Generator) -> str:
    organ, _, finding = label.partition(" ")
    organ_l = organ.lower()
    if code == 1:
        return rng.choice([f"{organ} shows {finding}.", f"There is {finding} in the {organ_l}.",
                           f"Findings consistent with {organ_l} {finding}."])
    if code == 2:
        return f"The {organ_l} is absent after resection."
    if code == 9:
        return f"The {organ_l} is not visualized."
    return rng.choice([f"No {finding} of the {organ_l}.", f"{organ} without {finding}.", ""])


def make_corpus(
    n_reports: int,
    labels: dict[str, float] | None = None,
    seed: int = 0,
    prefix: str = "r",
    absent_rate: float = 0.02,
    not_visible_rate: float = 0.03,
) -> Dataset:
    """Reports whose raw codes follow the given per-label prevalences.

    Codes 2 and 9 appear at ``absent_rate`` and ``not_visible_rate`` among
    non-positive entries.
    """
    labels = labels or DEFAULT_LABELS
    rng = np.random.default_rng(seed)
    reports = []
    width = len(str(n_reports))
    for i in range(n_reports):
        codes = {}
        parts = [str(rng.choice(_INTRO))]
        for name, prev in labels.items():
            u = rng.random()
            if u < prev:
                code = 1
            elif u < prev + absent_rate:
                code = 2
            elif u < prev + absent_rate + not_visible_rate:
                code = 9
            else:
                code = 0
            codes[name] = code
            s = _sentence(name, code, rng)
            if s:
                parts.append(s)
        reports.append(
            RadiologyReport(
                report_id=f"{prefix}{i:0{width}d}",
                text=" ".join(parts),
                labels=codes,
                patient_id=f"pt{int(rng.integers(0, n_reports)):0{width}d}",
            )
        )
    return Dataset(tuple(reports))
