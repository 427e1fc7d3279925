"""Acceptance gate: one test per criterion, each reporting PASS/FAIL and its runtime.

Run with ``pytest tests/test_acceptance.py -v``; a summary block is printed at
the end of the session. Regenerate the golden files with
``python -m tests.test_acceptance --regen`` (only after auditing a change).
"""

import csv
import functools
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from promptens import pipeline
from promptens.agent import ConfidenceCategory, agent_aggregate, category_to_uncertainty, parse_verdict
from promptens.aggregate import binary_entropy_uncertainty, posterior_predictive, uniform_weights
from promptens.evalkit import (
    AllExcludedError,
    ConfusionMatrix,
    EvalCase,
    cap_count,
    filter_by_uncertainty,
    filter_capped,
    metrics,
)
from promptens.gateway import BackendConfig, Gateway, MockJudge
from promptens.mlp import MlpTrainConfig, init_model, mlp_backward, mlp_forward
from promptens.weights import linear_objective, optimize_from_loglik, softmax
from tests.conftest import make_response, write_config
from tests.oracles import (
    filter_oracle,
    finite_difference_grads,
    grid_search_n3,
    metrics_oracle,
    relative_error,
)

GOLDEN = Path(__file__).parent / "golden"
RESULTS: dict[int, tuple[str, str, float]] = {}


def criterion(number: int, text: str, budget: float | None = None):
    """Record PASS/FAIL and wall time for one criterion; enforce the runtime budget.

    A test may return extra seconds (e.g. a shared fixture's setup) to count
    against its budget.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                extra = fn(*args, **kwargs) or 0.0
                seconds = time.perf_counter() - start + extra
                if budget is not None:
                    assert seconds < budget, f"took {seconds:.1f}s, budget {budget}s"
            except BaseException:
                RESULTS[number] = ("FAIL", text, time.perf_counter() - start)
                raise
            RESULTS[number] = ("PASS", text, seconds)

        return run

    return wrap


# --------------------------------------------------------------------------
# 1


@criterion(1, "metric oracle equivalence on 1,000 random confusion matrices; 40/10/10/40 gives kappa 0.6", 1.0)
def test_c1_metric_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        tp, fp, tn, fn = (int(x) for x in rng.integers(0, 500, 4))
        if tp + fp + tn + fn == 0:
            tn = 1
        got = metrics(ConfusionMatrix(tp, fp, tn, fn))
        for name, want in metrics_oracle(tp, fp, tn, fn).items():
            assert abs(getattr(got, name) - want) <= 1e-12, (name, tp, fp, tn, fn)
    fixed = metrics(ConfusionMatrix(tp=40, fp=10, tn=40, fn=10))
    assert fixed.kappa == 0.6


# --------------------------------------------------------------------------
# 2


@criterion(2, "linear optimizer matches softmax(mean loglik) at tau=1 and a 0.01 grid search for N=3", 10.0)
def test_c2_linear_closed_form():
    rng = np.random.default_rng(7)
    for n in (2, 3, 6):
        for _ in range(10):
            ell = np.log(rng.uniform(0.05, 0.99, n))
            w = optimize_from_loglik(ell)
            assert np.max(np.abs(w - softmax(ell))) < 1e-3
    for _ in range(5):
        ell = np.log(rng.uniform(0.05, 0.99, 3))
        grid_value, _ = grid_search_n3(ell, tau=1.0, step=0.01)
        assert abs(linear_objective(optimize_from_loglik(ell), ell, 1.0) - grid_value) < 2e-2


# --------------------------------------------------------------------------
# 3


@criterion(3, "MLP analytic gradients match central differences (rel. err < 1e-4) on 20 random models", 30.0)
def test_c3_mlp_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_prompts, n_feat, hidden, batch = int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 6)), 5
        model = init_model(n_feat, n_prompts, MlpTrainConfig(hidden=hidden, seed=seed))
        for k in model.params:
            model.params[k] = rng.standard_normal(model.params[k].shape)
        X = rng.standard_normal((batch, n_feat))
        P = rng.uniform(0.02, 0.98, (batch, n_prompts))
        mask = rng.random((batch, n_prompts)) < 0.85
        mask[:, 0] = True
        y = (rng.random(batch) < 0.5).astype(float)
        lam = float(rng.uniform(0.05, 1.0))  # always exercise the entropy path
        _, cache = mlp_forward(model, X, mask)
        analytic = mlp_backward(model, cache, P, y, lam)
        numeric = finite_difference_grads(model.params, X, P, mask, y, lam, h=1e-5)
        for k in analytic:
            assert relative_error(analytic[k], numeric[k]) < 1e-4, (seed, k)


# --------------------------------------------------------------------------
# 4


@criterion(4, "category->uncertainty mapping is exact; the two-answer cecum 'Likely No' case gives (LikelyNo, 0.5, No)")
def test_c4_agent_mapping():
    C = ConfidenceCategory
    assert {c: category_to_uncertainty(c) for c in C} == {
        C.DefinitelyYes: 0.0, C.DefinitelyNo: 0.0, C.LikelyYes: 0.5, C.LikelyNo: 0.5, C.Uncertain: 1.0,
    }
    verdict_text = ('{"Decision": "Likely No", "Explanation": "The majority of the answers (3 out of 4) suggest '
                    'that there is no inflammation in the cecum."}')
    verdict = parse_verdict(verdict_text)
    assert verdict.category is C.LikelyNo
    responses = [
        make_response(0.0, 1, answer="No", label="Cecum inflammation",
                      explanation="The report does not mention Cecum inflammation, but rather mentions air-filled "
                                  "bubbles in the soft tissue of the right abdomen, likely originating from the small "
                                  "intestine."),
        make_response(1.0, 2, answer="Yes", label="Cecum inflammation",
                      explanation="The report mentions the presence of bubbles or air pockets in the soft tissue of "
                                  "the right abdomen, which may be indicative of inflammation in the cecum."),
    ]
    cfg = BackendConfig(kind="mock", model_name="judge", mock={"fixed_decision": "Likely No"})
    pred = agent_aggregate(Gateway(cfg, MockJudge(cfg)), responses, "Cecum inflammation")
    assert (pred.trail["verdict"], pred.uncertainty, pred.decision) == ("Likely No", 0.5, "No")


# --------------------------------------------------------------------------
# 5


@criterion(5, "threshold and cap filtering invariants hold over 1,000 random trials; n=462 cap 0.2 -> 92")
def test_c5_filtering():
    rng = np.random.default_rng(5)
    for trial in range(1000):
        n = int(rng.integers(1, 80))
        # coarse grid makes ties common
        us = (np.round(rng.random(n) * 10) / 10).tolist() if trial % 2 else rng.random(n).tolist()
        threshold = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0, 1.01]))
        cap = float(rng.choice([0.05, 0.1, 0.2, 0.5, 1.0]))
        cases = [EvalCase(f"c{i}", u, True, True) for i, u in enumerate(us)]
        for fn, args, oracle_cap in ((filter_by_uncertainty, (threshold,), None),
                                     (filter_capped, (threshold, cap), cap)):
            try:
                rep = fn(cases, *args)
            except AllExcludedError as exc:
                rep = exc.report
            excluded = {cid for cid, _ in rep.excluded}
            assert excluded == {f"c{i}" for i in filter_oracle(us, threshold, oracle_cap)}
            assert len(rep.kept) + len(rep.excluded) == n
            assert all(u >= threshold for _, u in rep.excluded)
            if oracle_cap is None:
                assert all(c.uncertainty < threshold for c in rep.kept)
            else:
                assert len(rep.excluded) <= math.floor(cap * n)
                if rep.excluded:
                    low = min(u for _, u in rep.excluded)
                    assert all(c.uncertainty <= low for c in rep.kept if c.uncertainty >= threshold)
    assert cap_count(462, 0.2) == 92
    all_high = [EvalCase(f"c{i}", 0.9, True, True) for i in range(462)]
    rep = filter_capped(all_high, 0.5, 0.2)
    assert len(rep.excluded) == 92 and f"{92 / 462:.2%}" == "19.91%"


# --------------------------------------------------------------------------
# 6 and 7 share one end-to-end mock run


class GoldenRun:
    def __init__(self, out_dir: Path, seconds: float, result: dict):
        self.out_dir = out_dir
        self.seconds = seconds
        self.result = result

    def setup_cost(self) -> float:
        """Pipeline wall time, charged to every criterion that uses the run."""
        return self.seconds


def run_golden_pipeline(work_dir: Path) -> tuple[Path, dict]:
    cfg = pipeline.load_config(write_config(work_dir))
    pipeline.cmd_ingest(cfg)
    pipeline.cmd_run(cfg)
    pipeline.cmd_optimize(cfg)
    pipeline.cmd_train_mlp(cfg)
    result = pipeline.cmd_evaluate(cfg)
    return cfg.output_dir, result


def golden_files(out_dir: Path) -> list[Path]:
    names = ["summary_unfiltered.csv", "summary_threshold.csv", "summary_capped.csv",
             "median_uncertainty.csv", "metrics.csv", "predictions.csv"]
    files = [Path(n) for n in names]
    files += sorted(p.relative_to(out_dir) for p in (out_dir / "histograms").rglob("*.csv"))
    return files


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    start = time.perf_counter()
    out_dir, result = run_golden_pipeline(tmp_path_factory.mktemp("golden"))
    return GoldenRun(out_dir, time.perf_counter() - start, result)


def _median_table(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return {r["method"]: (float(r["median_uncertainty_correct"]), float(r["median_uncertainty_incorrect"]))
                for r in csv.DictReader(fh)}


@criterion(6, "every ensemble method: avg median uncertainty correct < incorrect; agent median-correct = 0", 60.0)
def test_c6_calibration_separation(golden_run):
    table = _median_table(golden_run.out_dir / "median_uncertainty.csv")
    assert set(table) == {"uniform", "linear", "mlp", "agent"}
    for method, (correct, incorrect) in table.items():
        assert correct < incorrect, method
    assert table["agent"][0] == 0.0
    return golden_run.setup_cost()


@criterion(7, "end-to-end mock run (500 reports x 8 labels, five methods) is byte-identical to the goldens", 120.0)
def test_c7_golden_run(golden_run):
    assert golden_run.result["eval_cases"] == 450
    files = golden_files(golden_run.out_dir)
    assert len(files) == 6 + 4 * 8
    expected = sorted(p.relative_to(GOLDEN) for p in GOLDEN.rglob("*.csv"))
    assert sorted(files) == expected
    mismatched = [str(f) for f in files if (golden_run.out_dir / f).read_bytes() != (GOLDEN / f).read_bytes()]
    assert not mismatched, f"differs from golden: {mismatched}"
    return golden_run.setup_cost()


# --------------------------------------------------------------------------
# 8


@criterion(8, "softmax/simplex/entropy/posterior property suite over 10,000 random draws", 5.0)
def test_c8_invariants():
    rng = np.random.default_rng(8)
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        x = rng.normal(0, rng.choice([1.0, 10.0, 100.0]), n)
        c = float(rng.normal(0, 50))
        w = softmax(x)
        assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-9
        assert np.max(np.abs(softmax(x + c) - w)) <= 1e-12
        p = rng.random(n)
        if rng.random() < 0.2:
            p[rng.integers(0, n)] = float(rng.choice([0.0, 1.0]))
        ph = posterior_predictive(w, p)
        assert p.min() - 1e-12 <= ph <= p.max() + 1e-12
        assert abs(posterior_predictive(uniform_weights(n), p) - p.mean()) <= 1e-12
        q = float(rng.random())
        u = binary_entropy_uncertainty(q)
        assert 0.0 <= u <= 1.0
        assert abs(u - binary_entropy_uncertainty(1.0 - q)) <= 1e-12
        assert u <= binary_entropy_uncertainty(0.5) == 1.0
    assert binary_entropy_uncertainty(0.0) == binary_entropy_uncertainty(1.0) == 0.0


def regenerate_goldens() -> None:
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        out_dir, _ = run_golden_pipeline(Path(tmp))
        if GOLDEN.exists():
            shutil.rmtree(GOLDEN)
        for f in golden_files(out_dir):
            (GOLDEN / f).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(out_dir / f, GOLDEN / f)
    print(f"wrote goldens to {GOLDEN}")


if __name__ == "__main__":
    if "--regen" in sys.argv:
        regenerate_goldens()
    else:
        print(__doc__)
