import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptens.aggregate import (
    AllFailedError,
    aggregate,
    binary_entropy_uncertainty,
    check_simplex,
    decide,
    mean_entropy_uncertainty,
    posterior_predictive,
    uniform_weights,
)
from tests.conftest import make_response

probs = st.floats(0.0, 1.0, allow_nan=False)


def test_uniform_weights():
    assert np.allclose(uniform_weights(6), 1 / 6)
    assert uniform_weights(1).tolist() == [1.0]
    assert abs(uniform_weights(3).sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        uniform_weights(0)


def test_check_simplex():
    check_simplex([0.25, 0.75])
    for bad in ([0.5, 0.6], [-0.1, 1.1], []):
        with pytest.raises(ValueError):
            check_simplex(bad)


@pytest.mark.parametrize("w,p,expected", [
    ((0.5, 0.5), (0.2, 0.8), 0.5),
    ((1.0, 0.0), (0.3, 0.9), 0.3),
    ((2 / 3, 1 / 3), (0.9, 0.3), 0.7),
])
def test_posterior_predictive_examples(w, p, expected):
    assert posterior_predictive(w, p) == pytest.approx(expected, abs=1e-12)


def test_posterior_predictive_mask_and_errors():
    assert posterior_predictive([0.5, 0.25, 0.25], [0.2, 0.5, 0.8], [True, False, True]) == pytest.approx(0.4)
    with pytest.raises(AllFailedError):
        posterior_predictive([0.5, 0.5], [0.1, 0.2], [False, False])
    with pytest.raises(ValueError):
        posterior_predictive([1.0], [0.1, 0.2])


@pytest.mark.parametrize("p,u", [(0.5, 1.0), (0.0, 0.0), (1.0, 0.0)])
def test_entropy_fixed_points(p, u):
    assert binary_entropy_uncertainty(p) == u


def test_entropy_three_quarters():
    oracle = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))
    assert binary_entropy_uncertainty(0.75) == pytest.approx(oracle, abs=1e-12)
    assert round(oracle, 4) == 0.8113


@given(probs)
def test_entropy_symmetric_bounded(p):
    u = binary_entropy_uncertainty(p)
    assert 0.0 <= u <= 1.0
    assert u == pytest.approx(binary_entropy_uncertainty(1.0 - p), abs=1e-12)
    if p != 0.5:
        assert u < 1.0


@pytest.mark.parametrize("p,d", [(0.6, "Yes"), (0.4, "No"), (0.5, "No"), (np.nextafter(0.5, 1), "Yes")])
def test_decide(p, d):
    assert decide(p) == d


@given(st.lists(probs, min_size=1, max_size=8))
def test_uniform_is_arithmetic_mean(p):
    assert posterior_predictive(uniform_weights(len(p)), p) == pytest.approx(sum(p) / len(p), abs=1e-12)


@given(st.lists(st.tuples(st.floats(0.01, 1.0), probs), min_size=1, max_size=8), st.integers(0, 7), probs)
def test_posterior_bounded_and_monotone(pairs, idx, bump):
    raw = np.array([a for a, _ in pairs])
    w = raw / raw.sum()
    p = np.array([b for _, b in pairs])
    ph = posterior_predictive(w, p)
    assert p.min() - 1e-12 <= ph <= p.max() + 1e-12
    i = idx % len(p)
    higher = p.copy()
    higher[i] = max(p[i], bump)
    assert posterior_predictive(w, higher) >= ph - 1e-12


def test_aggregate_all_yes():
    rs = [make_response(1.0, i) for i in range(1, 7)]
    pred = aggregate("uniform", rs, uniform_weights(6))
    assert (pred.p_hat, pred.decision, pred.uncertainty) == (1.0, "Yes", 0.0)
    assert [e["template_id"] for e in pred.trail["prompts"]] == list(range(1, 7))


def test_aggregate_split_vote():
    rs = [make_response(p, i + 1) for i, p in enumerate((1, 1, 1, 0, 0, 0))]
    pred = aggregate("uniform", rs, uniform_weights(6))
    assert pred.p_hat == pytest.approx(0.5)
    assert pred.uncertainty == pytest.approx(1.0)
    assert pred.decision == "No"


def test_aggregate_renormalizes_over_parsed():
    rs = [make_response(0.9, i) for i in range(1, 6)] + [make_response(0.5, 6, status="failed")]
    pred = aggregate("uniform", rs, uniform_weights(6))
    assert pred.p_hat == pytest.approx(0.9)
    assert pred.trail["prompts"][5]["parsed"] is False


def test_aggregate_all_failed():
    rs = [make_response(0.5, i, status="failed") for i in range(1, 4)]
    pred = aggregate("linear", rs, uniform_weights(3))
    assert (pred.decision, pred.uncertainty) == ("No", 1.0)
    assert pred.trail["all_failed"]


def test_mean_entropy_mode():
    rs = [make_response(1.0, 1), make_response(0.0, 2)]
    mixture = aggregate("uniform", rs, uniform_weights(2))
    mean_h = aggregate("uniform", rs, uniform_weights(2), uncertainty_mode="mean_entropy")
    assert mixture.uncertainty == pytest.approx(1.0)
    assert mean_h.uncertainty == 0.0
    assert mean_entropy_uncertainty([0.5, 0.5], [0.5, 0.75]) == pytest.approx(
        0.5 + 0.5 * binary_entropy_uncertainty(0.75))
