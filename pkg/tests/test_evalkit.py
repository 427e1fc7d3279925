import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptens.evalkit import (
    AllExcludedError,
    ConfusionMatrix,
    EvalCase,
    MetricsRecord,
    baseline_single_prompt,
    bin_edges,
    cap_count,
    confusion,
    filter_by_uncertainty,
    filter_capped,
    filtered_metrics,
    macro_average,
    median_uncertainty_summary,
    metrics,
    render_histogram,
    uncertainty_histogram,
)
from tests.oracles import confusion_oracle, filter_oracle, metrics_oracle


def cases_from(us, preds=None, truths=None):
    preds = preds or [True] * len(us)
    truths = truths or [True] * len(us)
    return [EvalCase(f"c{i}", u, p, t) for i, (u, p, t) in enumerate(zip(us, preds, truths))]


def test_confusion_examples():
    assert confusion(["Yes", "No"], ["Yes", "No"]) == ConfusionMatrix(1, 0, 1, 0)
    assert confusion([False] * 4, [True] * 4).fn == 4
    with pytest.raises(ValueError):
        confusion([True], [True, False])


def test_confusion_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, t = rng.random(100) < 0.4, rng.random(100) < 0.3
        cm = confusion(p.tolist(), t.tolist())
        assert {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn} == confusion_oracle(p, t)


def test_metrics_fixed_case():
    m = metrics(ConfusionMatrix(tp=40, fp=10, tn=40, fn=10))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.8, 0.8, 0.8, 0.8)
    assert m.kappa == 0.6


def test_metrics_perfect_and_empty():
    m = metrics(ConfusionMatrix(5, 0, 7, 0))
    assert (m.accuracy, m.f1, m.precision, m.recall, m.kappa) == (1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(0, 0, 0, 0))


def test_metrics_degenerate_denominators():
    m = metrics(ConfusionMatrix(0, 0, 10, 0))
    assert (m.precision, m.recall, m.f1, m.kappa) == (0.0, 0.0, 0.0, 0.0)


def test_kappa_near_zero_at_matching_marginals():
    # predictions independent of truth: p_o == p_e exactly
    m = metrics(ConfusionMatrix(tp=9, fp=21, fn=21, tn=49))
    assert m.kappa == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200), st.integers(0, 200))
def test_metrics_match_oracle(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = metrics(ConfusionMatrix(tp, fp, tn, fn))
    for k, v in metrics_oracle(tp, fp, tn, fn).items():
        assert getattr(m, k) == pytest.approx(v, abs=1e-12)
    assert 0 <= m.accuracy <= 1 and -1 <= m.kappa <= 1


def rec(acc, **kw):
    return MetricsRecord(acc, kw.get("f1", acc), acc, acc, kw.get("kappa", 0.0), kw.get("n", 10))


def test_macro_average():
    avg = macro_average([rec(0.8), rec(0.9)])
    assert avg.accuracy == pytest.approx(0.85)
    assert avg.included_cases == 20
    single = rec(0.7)
    assert macro_average([single]).accuracy == 0.7
    with pytest.raises(ValueError):
        macro_average([])


def test_macro_average_23_labels():
    rng = np.random.default_rng(3)
    records = [rec(*rng.random(1), kappa=float(rng.uniform(-1, 1))) for _ in range(23)]
    avg = macro_average(records)
    total = 0.0
    for r in records:
        total += r.kappa
    assert avg.kappa == pytest.approx(total / 23, abs=1e-12)
    shuffled = [records[i] for i in rng.permutation(23)]
    assert macro_average(shuffled).accuracy == pytest.approx(avg.accuracy, abs=1e-15)


def test_baseline():
    truths = [True, False, True, False, True, False, True, False, True, False]
    seventy = [not t if i < 3 else t for i, t in enumerate(truths)]
    ninety = [not t if i < 1 else t for i, t in enumerate(truths)]
    b = baseline_single_prompt([seventy, ninety], truths)
    assert b.accuracy == pytest.approx(0.8)
    assert b.excluded_cases == 0
    same = baseline_single_prompt([ninety] * 6, truths)
    assert same.accuracy == metrics(confusion(ninety, truths)).accuracy


def test_threshold_filter_examples():
    r = filter_by_uncertainty(cases_from([0.1, 0.5, 0.6, 0.4]), 0.5)
    assert [cid for cid, _ in r.excluded] == ["c1", "c2"]
    assert filter_by_uncertainty(cases_from([0.1, 1.0]), 1.01).excluded == []
    with pytest.raises(AllExcludedError):
        filter_by_uncertainty(cases_from([0.1, 0.2]), 0.0)


def test_capped_examples():
    assert cap_count(462, 0.2) == 92
    us = [0.1, 0.9, 0.6, 0.2, 0.7, 0.0, 0.55, 0.3, 0.95, 0.4]
    r = filter_capped(cases_from(us), 0.5, 0.2)
    assert sorted(cid for cid, _ in r.excluded) == ["c1", "c8"]
    assert filter_capped(cases_from([0.1, 0.2]), 0.5, 0.2).excluded == []
    ties = filter_capped(cases_from([0.8] * 10), 0.5, 0.2)
    assert [cid for cid, _ in ties.excluded] == ["c0", "c1"]


def test_capped_462():
    us = np.linspace(0, 1, 462)
    r = filter_capped(cases_from(us.tolist()), 0.5, 0.2)
    assert len(r.excluded) == 92
    assert f"{len(r.excluded) / 462:.2%}" == "19.91%"


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.01, 1), st.floats(0.05, 1))
@settings(max_examples=200)
def test_filter_invariants(us, threshold, cap):
    cases = cases_from(us)
    try:
        plain = filter_by_uncertainty(cases, threshold)
    except AllExcludedError as e:
        plain = e.report
    assert {cid for cid, _ in plain.excluded} == {f"c{i}" for i in filter_oracle(us, threshold)}
    assert len(plain.kept) + len(plain.excluded) == len(us)
    assert all(c.uncertainty < threshold for c in plain.kept)
    try:
        capped = filter_capped(cases, threshold, cap)
    except AllExcludedError as e:
        capped = e.report
    excluded = {cid for cid, _ in capped.excluded}
    assert excluded == {f"c{i}" for i in filter_oracle(us, threshold, cap)}
    assert len(excluded) <= math.floor(cap * len(us) + 1e-9)
    if capped.excluded:
        lowest = min(u for _, u in capped.excluded)
        assert all(c.uncertainty <= lowest for c in capped.kept if c.uncertainty >= threshold)


def test_filtered_metrics_counts():
    cases = cases_from([0.1, 0.9, 0.2], preds=[True, False, False], truths=[True, True, False])
    m = filtered_metrics(filter_by_uncertainty(cases, 0.5))
    assert (m.included_cases, m.excluded_cases, m.accuracy) == (2, 1, 1.0)
    assert m.excluded_fraction == pytest.approx(1 / 3)


def test_histogram_example():
    rows = uncertainty_histogram([0, 0, 0.5, 1], [True, True, False, False], 2)
    assert rows == [(0.0, 0.5, 2, 0), (0.5, 1.0, 0, 2)]
    assert uncertainty_histogram([0.0] * 5, [True] * 5, 10)[0][2] == 5


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=50), st.integers(1, 20))
def test_histogram_conserves(cases, bins):
    rows = uncertainty_histogram([u for u, _ in cases], [c for _, c in cases], bins)
    assert sum(r[2] + r[3] for r in rows) == len(cases)
    edges = bin_edges(bins)
    assert edges[0] == 0.0 and edges[-1] == 1.0
    assert all(rows[i][1] == rows[i + 1][0] for i in range(bins - 1))


def test_render_histogram():
    text = render_histogram(uncertainty_histogram([0.1, 0.9], [True, False], 2))
    assert "[0.50,1.00]" in text and text.count("\n") == 4


def test_median_summary():
    s = median_uncertainty_summary({"a": [(0, True), (0, True), (0.5, True), (1.0, False)]})
    assert s.avg_median_correct == 0.0 and s.avg_median_incorrect == 1.0
    two = median_uncertainty_summary({"a": [(0.0, True)], "b": [(0.1, True), (0.3, True)]})
    assert two.avg_median_correct == pytest.approx(0.1)
    assert math.isnan(two.avg_median_incorrect) and two.labels_incorrect == 0
    with pytest.raises(ValueError):
        median_uncertainty_summary({"a": []})
