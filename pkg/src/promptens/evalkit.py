"""Classification metrics, uncertainty filtering and calibration summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "kappa")


class AllExcludedError(ValueError):
    def __init__(self, report: "FilterReport"):
        super().__init__(f"every case has uncertainty >= {report.threshold}")
        self.report = report


def _as_bool(v) -> bool:
    if isinstance(v, str):
        if v not in ("Yes", "No"):
            raise ValueError(f"expected 'Yes' or 'No', got {v!r}")
        return v == "Yes"
    return bool(v)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsRecord:
    accuracy: float
    f1: float
    precision: float
    recall: float
    kappa: float
    included_cases: int
    excluded_cases: int = 0
    excluded_fraction: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(predictions: Sequence, truths: Sequence) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(truths)} truths")
    pred = np.array([_as_bool(p) for p in predictions], dtype=bool)
    true = np.array([_as_bool(t) for t in truths], dtype=bool)
    return ConfusionMatrix(
        tp=int(np.sum(pred & true)),
        fp=int(np.sum(pred & ~true)),
        tn=int(np.sum(~pred & ~true)),
        fn=int(np.sum(~pred & true)),
    )


def metrics(cm: ConfusionMatrix, excluded: int = 0) -> MetricsRecord:
    """Metrics from counts; undefined ratios are reported as 0."""
    n = cm.total
    if n == 0:
        raise ValueError("metrics of an empty confusion matrix are undefined")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    # integer numerator/denominator: one rounding step
    chance = (tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)
    denom = n * n - chance
    kappa = (n * (tp + tn) - chance) / denom if denom else 0.0
    total = n + excluded
    return MetricsRecord(
        accuracy=(tp + tn) / n,
        f1=f1,
        precision=precision,
        recall=recall,
        kappa=kappa,
        included_cases=n,
        excluded_cases=excluded,
        excluded_fraction=excluded / total,
    )


def macro_average(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """Unweighted mean of each metric; case counts are summed."""
    if not records:
        raise ValueError("nothing to average")
    means = {m: float(np.mean([getattr(r, m) for r in records])) for m in METRIC_NAMES}
    inc = sum(r.included_cases for r in records)
    exc = sum(r.excluded_cases for r in records)
    return MetricsRecord(**means, included_cases=inc, excluded_cases=exc,
                         excluded_fraction=exc / (inc + exc) if inc + exc else 0.0)


def baseline_single_prompt(per_template_predictions: Sequence[Sequence], truths: Sequence) -> MetricsRecord:
    """Score each template on its own, then average; nothing is ever excluded."""
    records = [metrics(confusion(preds, truths)) for preds in per_template_predictions]
    avg = macro_average(records)
    avg.included_cases = len(truths)
    avg.excluded_cases = 0
    avg.excluded_fraction = 0.0
    return avg


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    uncertainty: float
    prediction: bool
    truth: bool

    @property
    def correct(self) -> bool:
        return self.prediction == self.truth


@dataclass
class FilterReport:
    threshold: float
    cap_fraction: float | None
    kept: list = field(default_factory=list)
    excluded: list = field(default_factory=list)  # (case_id, uncertainty)

    @property
    def kept_ids(self) -> list[str]:
        return [c.case_id for c in self.kept]


def filter_by_uncertainty(cases: Sequence[EvalCase], threshold: float = 0.5) -> FilterReport:
    """Drop every case with uncertainty >= threshold."""
    report = FilterReport(threshold, None)
    for c in cases:
        if c.uncertainty >= threshold:
            report.excluded.append((c.case_id, c.uncertainty))
        else:
            report.kept.append(c)
    if cases and not report.kept:
        raise AllExcludedError(report)
    return report


def cap_count(n: int, cap_fraction: float) -> int:
    return int(math.floor(cap_fraction * n + 1e-9))


def filter_capped(cases: Sequence[EvalCase], threshold: float = 0.5, cap_fraction: float = 0.2) -> FilterReport:
    """Like ``filter_by_uncertainty`` but drop at most floor(cap * n) cases.

    When more cases qualify, the highest-uncertainty ones go first; ties keep
    input order.
    """
    if not 0 < cap_fraction <= 1:
        raise ValueError("cap_fraction must be in (0, 1]")
    limit = cap_count(len(cases), cap_fraction)
    candidates = [i for i, c in enumerate(cases) if c.uncertainty >= threshold]
    if len(candidates) > limit:
        candidates = sorted(candidates, key=lambda i: -cases[i].uncertainty)[:limit]
    drop = set(candidates)
    report = FilterReport(threshold, cap_fraction)
    for i, c in enumerate(cases):
        if i in drop:
            report.excluded.append((c.case_id, c.uncertainty))
        else:
            report.kept.append(c)
    if cases and not report.kept:
        raise AllExcludedError(report)
    return report


def filtered_metrics(report: FilterReport) -> MetricsRecord:
    kept = report.kept
    cm = confusion([c.prediction for c in kept], [c.truth for c in kept])
    return metrics(cm, excluded=len(report.excluded))


def bin_edges(bin_count: int) -> list[float]:
    return [i / bin_count for i in range(bin_count + 1)]


def uncertainty_histogram(uncertainties: Sequence[float], correct: Sequence[bool], bin_count: int = 10) -> list[tuple]:
    """Rows ``(bin_low, bin_high, correct_count, incorrect_count)`` over equal bins of [0, 1].

    Bins are half-open except the last, which includes 1.
    """
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    edges = bin_edges(bin_count)
    counts = np.zeros((bin_count, 2), dtype=int)
    for u, ok in zip(uncertainties, correct):
        idx = int(np.searchsorted(edges, u, side="right")) - 1
        idx = min(max(idx, 0), bin_count - 1)
        counts[idx, 0 if ok else 1] += 1
    return [(edges[i], edges[i + 1], int(counts[i, 0]), int(counts[i, 1])) for i in range(bin_count)]


def render_histogram(rows: Sequence[tuple], width: int = 40) -> str:
    peak = max([max(r[2], r[3]) for r in rows] + [1])
    out = []
    for lo, hi, ok, bad in rows:
        out.append(f"[{lo:.2f},{hi:.2f}{']' if hi == 1 else ')'} correct   {ok:5d} {'#' * round(width * ok / peak)}")
        out.append(f"{'':12} incorrect {bad:5d} {'x' * round(width * bad / peak)}")
    return "\n".join(out) + "\n"


@dataclass
class MedianSummary:
    avg_median_correct: float
    avg_median_incorrect: float
    labels_correct: int
    labels_incorrect: int


def median_uncertainty_summary(per_label: Mapping[str, Iterable[tuple[float, bool]]]) -> MedianSummary:
    """Average over labels of the median uncertainty among correct and among incorrect cases.

    A label with no cases on one side only contributes to the other side.
    """
    med_ok, med_bad = [], []
    for cases in per_label.values():
        cases = list(cases)
        ok = [u for u, c in cases if c]
        bad = [u for u, c in cases if not c]
        if ok:
            med_ok.append(float(np.median(ok)))
        if bad:
            med_bad.append(float(np.median(bad)))
    if not med_ok and not med_bad:
        raise ValueError("no label has any evaluated case")
    return MedianSummary(
        avg_median_correct=float(np.mean(med_ok)) if med_ok else float("nan"),
        avg_median_incorrect=float(np.mean(med_bad)) if med_bad else float("nan"),
        labels_correct=len(med_ok),
        labels_incorrect=len(med_bad),
    )
