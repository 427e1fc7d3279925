"""End-to-end runs driven by a YAML/JSON config: ingest, query, optimize, train, evaluate."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import corpus
from .agent import agent_aggregate
from .aggregate import METHODS, aggregate, decide, uniform_weights
from .evalkit import (
    METRIC_NAMES,
    AllExcludedError,
    EvalCase,
    MetricsRecord,
    baseline_single_prompt,
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
from .gateway import (
    STRATEGIES,
    BackendConfig,
    Gateway,
    RequestKey,
    ResponseCache,
    cached_ensemble_query,
    make_backend,
)
from .mlp import (
    MlpTrainConfig,
    TrainingSet,
    batch_loss,
    load_model,
    make_layout,
    predict_weights,
    prompt_embeddings,
    save_model,
    train_mlp,
)
from .prompts import builtin_prompt_set, load_prompt_set
from .weights import LinearOptConfig, optimize_linear_weights, weights_to_json

logger = logging.getLogger(__name__)

BASE_URL_ENV = "PROMPTENS_BASE_URL"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: Path
    output_dir: Path
    train_dataset: Path | None = None
    prompts: Path | None = None
    extraction: BackendConfig = field(default_factory=BackendConfig)
    judge: BackendConfig = field(default_factory=BackendConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    probability_strategy: str = "logprob"
    vote_k: int = 5
    uncertainty_mode: str = "mixture"
    threshold: float = 0.5
    cap: float = 0.2
    bins: int = 10
    min_positives: int = corpus.DEFAULT_MIN_POSITIVES
    tuning_size: int = 50
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    linear: LinearOptConfig = field(default_factory=LinearOptConfig)
    mlp: MlpTrainConfig = field(default_factory=MlpTrainConfig)
    cache: Path | None = None
    source: dict = field(default_factory=dict)

    @property
    def cache_path(self) -> Path:
        return self.cache or self.output_dir / "cache.jsonl"

    def resolved(self) -> dict:
        out = copy.deepcopy(self.source)
        out.update(
            dataset=str(self.dataset), output_dir=str(self.output_dir),
            train_dataset=str(self.train_dataset) if self.train_dataset else None,
            prompts=str(self.prompts) if self.prompts else None,
            methods=list(self.methods), threshold=self.threshold, cap=self.cap, bins=self.bins, seed=self.seed,
            cache=str(self.cache_path),
        )
        out["backends"] = {"extraction": vars(self.extraction), "judge": vars(self.judge)}
        out["linear"] = vars(self.linear)
        out["mlp"] = vars(self.mlp)
        return out


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Read a config file; relative paths are taken from the file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = path.parent

    def p(key, required=False):
        v = raw.get(key)
        if v is None:
            if required:
                raise ConfigError(f"config is missing {key!r}")
            return None
        q = Path(v)
        return q if q.is_absolute() else (base / q)

    backends = raw.get("backends") or {}
    extraction = BackendConfig.from_dict(backends.get("extraction"))
    judge = BackendConfig.from_dict(backends.get("judge"))
    if os.environ.get(BASE_URL_ENV):
        extraction.base_url = os.environ[BASE_URL_ENV]
    seed = int(raw.get("seed", 0))
    lin = LinearOptConfig(**{"seed": seed, **(raw.get("linear") or {})})
    mlp_cfg = MlpTrainConfig(**{"seed": seed, **(raw.get("mlp") or {})})
    cfg = RunConfig(
        dataset=p("dataset", required=True),
        output_dir=p("output_dir") or base / "out",
        train_dataset=p("train_dataset"),
        prompts=p("prompts"),
        extraction=extraction,
        judge=judge,
        methods=list(raw.get("methods", METHODS)),
        probability_strategy=raw.get("probability_strategy", "logprob"),
        vote_k=int(raw.get("vote_k", 5)),
        uncertainty_mode=raw.get("uncertainty_mode", "mixture"),
        threshold=float(raw.get("threshold", 0.5)),
        cap=float(raw.get("cap", 0.2)),
        bins=int(raw.get("bins", 10)),
        min_positives=int(raw.get("min_positives", corpus.DEFAULT_MIN_POSITIVES)),
        tuning_size=int(raw.get("tuning_size", 50)),
        split_fractions=tuple(raw.get("split_fractions", (0.6, 0.2, 0.2))),
        seed=seed,
        linear=lin,
        mlp=mlp_cfg,
        cache=p("cache"),
        source=raw,
    )
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    if cfg.probability_strategy not in STRATEGIES:
        raise ConfigError(f"unknown probability strategy {cfg.probability_strategy!r}")
    for f in (cfg.dataset, cfg.train_dataset, cfg.prompts):
        if f is not None and not f.exists():
            raise ConfigError(f"referenced file does not exist: {f}")
    return cfg


def write_resolved_config(cfg: RunConfig, command: str) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / f"resolved_config.{command}.json").write_text(
        json.dumps(cfg.resolved(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )


class Context:
    """Datasets, prompts and gateways shared by the commands of one run."""

    def __init__(self, cfg: RunConfig, transport=None):
        self.cfg = cfg
        self.test = corpus.binarize_labels(corpus.load_dataset(cfg.dataset))
        self.pool = corpus.binarize_labels(corpus.load_dataset(cfg.train_dataset)) if cfg.train_dataset else None
        self.labels = corpus.select_labels(self.test, cfg.min_positives)
        self.pool_labels = corpus.select_labels(self.pool, cfg.min_positives) if self.pool is not None else []
        self.prompt_set = load_prompt_set(cfg.prompts) if cfg.prompts else builtin_prompt_set()
        self.cache = ResponseCache(cfg.cache_path)
        self.gateway = Gateway(cfg.extraction, make_backend(cfg.extraction, "extraction", self.truth, transport), self.cache)
        self._judge = None
        self._transport = transport

    def truth(self, report_id: str, label: str) -> bool:
        for ds in (self.test, self.pool):
            if ds is not None and report_id in ds._index:
                return ds.truth(report_id, label)
        raise KeyError(report_id)

    @property
    def judge(self) -> Gateway:
        if self._judge is None:
            self._judge = Gateway(self.cfg.judge, make_backend(self.cfg.judge, "judge", transport=self._transport), self.cache)
        return self._judge

    def tuning_ids(self) -> list[str]:
        return corpus.holdout_tuning_subset(self.test, self.cfg.tuning_size, self.cfg.seed)

    def eval_ids(self) -> list[str]:
        held = set(self.tuning_ids())
        return [i for i in self.test.ids if i not in held]

    def responses(self, dataset: corpus.Dataset, report_id: str, label: str):
        return cached_ensemble_query(dataset[report_id], label, self.prompt_set, self.gateway,
                                     self.cfg.probability_strategy, self.cfg.vote_k)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> dict:
    write_resolved_config(cfg, "ingest")
    manifests = {}
    for name, path in (("dataset", cfg.dataset), ("train_dataset", cfg.train_dataset)):
        if path is None:
            continue
        ds = corpus.binarize_labels(corpus.load_dataset(path))
        manifests[name] = corpus.build_manifest(ds, cfg.min_positives)
    (cfg.output_dir / "manifest.json").write_text(json.dumps(manifests, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifests


def _work_items(ctx: Context):
    items = [(ctx.test, rid, label) for rid in ctx.test.ids for label in ctx.labels]
    if ctx.pool is not None:
        items += [(ctx.pool, rid, label) for rid in ctx.pool.ids for label in ctx.pool_labels]
    return items


def cmd_run(cfg: RunConfig, dry_run: bool = False, transport=None) -> dict:
    """Query every (report, label, template) not yet cached."""
    ctx = Context(cfg, transport)
    items = _work_items(ctx)
    attempts = cfg.vote_k if cfg.probability_strategy == "vote-k" else 1
    if dry_run:
        pending = sum(
            not ctx.gateway.is_cached(RequestKey(rid, label, t.template_id, a))
            for _, rid, label in items for t in ctx.prompt_set for a in range(attempts)
        )
        return {"requests": pending, "cached": len(ctx.cache), "dry_run": True}
    write_resolved_config(cfg, "run")
    before = ctx.gateway.requests

    def work(item):
        ds, rid, label = item
        return ctx.responses(ds, rid, label)

    if cfg.extraction.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.extraction.parallelism) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    failed = sum(r.parse_status == "failed" for rs in results for r in rs)
    return {"cases": len(items), "responses": sum(len(rs) for rs in results), "failed": failed,
            "requests": ctx.gateway.requests - before, "cached": len(ctx.cache)}


def _response_matrix(responses_per_case):
    P = np.array([[r.p_yes for r in rs] for rs in responses_per_case], dtype=float)
    M = np.array([[r.parse_status != "failed" for r in rs] for rs in responses_per_case], dtype=bool)
    return P, M


def cmd_optimize(cfg: RunConfig, transport=None) -> dict:
    """Per-label weights from the held-out tuning cases."""
    ctx = Context(cfg, transport)
    write_resolved_config(cfg, "optimize")
    tune = ctx.tuning_ids()
    out = {}
    for label in ctx.labels:
        rs = [ctx.responses(ctx.test, rid, label) for rid in tune]
        P, M = _response_matrix(rs)
        y = [ctx.test.truth(rid, label) for rid in tune]
        out[label] = optimize_linear_weights(P, y, M, cfg.linear)
    doc = weights_to_json(out)
    (cfg.output_dir / "linear_weights.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def _training_set(ctx: Context, dataset, ids, labels, embeddings):
    cases = [(ctx.responses(dataset, rid, label), dataset.truth(rid, label)) for rid in ids for label in labels]
    return TrainingSet.from_cases(cases, embeddings)


def cmd_train_mlp(cfg: RunConfig, transport=None) -> dict:
    """One model for all labels, trained on the automatically labelled pool."""
    ctx = Context(cfg, transport)
    write_resolved_config(cfg, "train-mlp")
    if ctx.pool is not None:
        source, labels = ctx.pool, ctx.pool_labels
        ids = source.ids
    else:
        held = set(ctx.tuning_ids())
        source, labels = ctx.test, ctx.labels
        ids = [i for i in source.ids if i in held]
    split = corpus.split_dataset(source.subset(ids), cfg.split_fractions, cfg.seed)
    emb = prompt_embeddings([t.body for t in ctx.prompt_set], cfg.mlp.embedding_dim) if cfg.mlp.embedding_dim else None
    layout = make_layout(len(ctx.prompt_set), emb)
    layout["template_ids"] = [t.template_id for t in ctx.prompt_set]
    train = _training_set(ctx, source, split.train_ids, labels, emb)
    val = _training_set(ctx, source, split.validation_ids, labels, emb)
    test = _training_set(ctx, source, split.test_ids, labels, emb)
    model = train_mlp(train, val, cfg.mlp, layout)
    save_model(model, cfg.output_dir / "mlp_model.json")
    with open(cfg.output_dir / "mlp_training_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in model.history:
            w.writerow([h["epoch"], f"{h['train_loss']:.6f}", f"{h['val_loss']:.6f}"])
    test_loss = batch_loss(model, test.X, test.P, test.mask, test.y, cfg.mlp.lam) if len(test) else None
    summary = {"train_cases": len(train), "validation_cases": len(val), "test_cases": len(test),
               "best_val_loss": min(h["val_loss"] for h in model.history), "test_loss": test_loss}
    (cfg.output_dir / "mlp_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


# --------------------------------------------------------------------------
# evaluation


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower()


def _predict(ctx: Context, method: str, responses, label: str, linear: dict, model):
    n = len(responses)
    mode = ctx.cfg.uncertainty_mode
    if method == "uniform":
        return aggregate("uniform", responses, uniform_weights(n), mode)
    if method == "linear":
        return aggregate("linear", responses, np.asarray(linear[label]), mode)
    if method == "mlp":
        return aggregate("mlp", responses, predict_weights(model, responses), mode)
    if method == "agent":
        return agent_aggregate(ctx.judge, responses, label)
    raise ValueError(method)


@dataclass
class LabelResult:
    records: dict = field(default_factory=dict)  # setting -> MetricsRecord | None
    flags: dict = field(default_factory=dict)  # setting -> reason
    cases: list = field(default_factory=list)


def _setting_records(cases: list[EvalCase], threshold: float, cap: float) -> tuple[dict, dict]:
    records: dict[str, Any] = {}
    flags: dict[str, str] = {}
    records["unfiltered"] = metrics(confusion([c.prediction for c in cases], [c.truth for c in cases]))
    had_pos = any(c.truth for c in cases)
    had_neg = any(not c.truth for c in cases)
    for setting, fn in (("threshold", lambda: filter_by_uncertainty(cases, threshold)),
                        ("capped", lambda: filter_capped(cases, threshold, cap))):
        try:
            rep = fn()
        except AllExcludedError as exc:
            flags[setting] = "all_excluded"
            n = len(exc.report.excluded)
            records[setting] = MetricsRecord(0.0, 0.0, 0.0, 0.0, 0.0, 0, n, 1.0)
            continue
        records[setting] = filtered_metrics(rep)
        kept_pos = any(c.truth for c in rep.kept)
        kept_neg = any(not c.truth for c in rep.kept)
        if (had_pos and not kept_pos) or (had_neg and not kept_neg):
            flags[setting] = "class_emptied"
    return records, flags


SETTINGS = ("unfiltered", "threshold", "capped")
TABLE_FILES = {"unfiltered": "summary_unfiltered.csv", "threshold": "summary_threshold.csv", "capped": "summary_capped.csv"}


def cmd_evaluate(cfg: RunConfig, methods: list[str] | None = None, transport=None) -> dict:
    """Metrics per (method, label), macro tables, histograms and median-uncertainty summary."""
    ctx = Context(cfg, transport)
    write_resolved_config(cfg, "evaluate")
    methods = methods or cfg.methods
    out = cfg.output_dir
    eval_ids = ctx.eval_ids()
    linear = model = None
    if "linear" in methods:
        path = out / "linear_weights.json"
        if not path.exists():
            raise ConfigError(f"{path} not found; run the optimize command first")
        linear = json.loads(path.read_text(encoding="utf-8"))
    if "mlp" in methods:
        path = out / "mlp_model.json"
        if not path.exists():
            raise ConfigError(f"{path} not found; run the train-mlp command first")
        model = load_model(path)

    responses = {label: [ctx.responses(ctx.test, rid, label) for rid in eval_ids] for label in ctx.labels}
    truths = {label: [ctx.test.truth(rid, label) for rid in eval_ids] for label in ctx.labels}

    results: dict[str, dict[str, LabelResult]] = {}
    pred_rows = []
    for method in methods:
        results[method] = {}
        for label in ctx.labels:
            y = truths[label]
            lr = LabelResult()
            if method == "baseline":
                per_template = [[decide(rs[k].p_yes) == "Yes" for rs in responses[label]]
                                for k in range(len(ctx.prompt_set))]
                rec = baseline_single_prompt(per_template, y)
                lr.records = {s: rec for s in SETTINGS}
                lr.cases = [EvalCase(rid, 0.0, False, t) for rid, t in zip(eval_ids, y)]
            else:
                for rid, rs, t in zip(eval_ids, responses[label], y):
                    pred = _predict(ctx, method, rs, label, linear, model)
                    lr.cases.append(EvalCase(rid, pred.uncertainty, pred.decision == "Yes", t))
                    pred_rows.append([method, label, rid, _fmt(pred.p_hat), pred.decision, _fmt(pred.uncertainty),
                                      "Yes" if t else "No", int(bool(pred.trail.get("agent_fallback") or pred.trail.get("all_failed")))])
                lr.records, lr.flags = _setting_records(lr.cases, cfg.threshold, cfg.cap)
            results[method][label] = lr

    _write_metrics(out, results, ctx.labels)
    _write_tables(out, results, ctx.labels)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "label", "report_id", "p_hat", "decision", "uncertainty", "truth", "flagged"])
        w.writerows(pred_rows)

    summary_rows = []
    hist_dir = out / "histograms"
    for method in methods:
        if method == "baseline":
            continue
        per_label = {}
        for label in ctx.labels:
            cases = results[method][label].cases
            per_label[label] = [(c.uncertainty, c.correct) for c in cases]
            rows = uncertainty_histogram([c.uncertainty for c in cases], [c.correct for c in cases], cfg.bins)
            d = hist_dir / method
            d.mkdir(parents=True, exist_ok=True)
            with open(d / f"{_slug(label)}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_low", "bin_high", "correct_count", "incorrect_count"])
                w.writerows([[_fmt(lo), _fmt(hi), ok, bad] for lo, hi, ok, bad in rows])
            (d / f"{_slug(label)}.txt").write_text(f"{method} / {label}\n" + render_histogram(rows), encoding="utf-8")
        s = median_uncertainty_summary(per_label)
        summary_rows.append([method, _fmt(s.avg_median_correct), _fmt(s.avg_median_incorrect),
                             s.labels_correct, s.labels_incorrect])
    with open(out / "median_uncertainty.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "median_uncertainty_correct", "median_uncertainty_incorrect",
                    "labels_with_correct", "labels_with_incorrect"])
        w.writerows(summary_rows)
    return {"methods": methods, "labels": ctx.labels, "eval_cases": len(eval_ids),
            "median_summary": {r[0]: (float(r[1]), float(r[2])) for r in summary_rows}}


def _macro(results_for_method: dict, labels, setting) -> tuple[MetricsRecord, int]:
    recs = [results_for_method[l].records[setting] for l in labels if setting not in results_for_method[l].flags]
    flagged = sum(setting in results_for_method[l].flags for l in labels)
    return (macro_average(recs) if recs else None), flagged


def _write_metrics(out: Path, results, labels) -> None:
    header = ["setting", "method", "label", *METRIC_NAMES, "included_cases", "excluded_cases", "excluded_fraction", "flag"]
    rows, doc = [], []
    for setting in SETTINGS:
        for method, per_label in results.items():
            for label in labels:
                r = per_label[label].records[setting]
                flag = per_label[label].flags.get(setting, "")
                rows.append([setting, method, label, *[_fmt(getattr(r, m)) for m in METRIC_NAMES],
                             r.included_cases, r.excluded_cases, _fmt(r.excluded_fraction), flag])
                doc.append({"setting": setting, "method": method, "label": label, **r.as_dict(), "flag": flag})
            macro, flagged = _macro(per_label, labels, setting)
            if macro is not None:
                rows.append([setting, method, "MACRO", *[_fmt(getattr(macro, m)) for m in METRIC_NAMES],
                             macro.included_cases, macro.excluded_cases, _fmt(macro.excluded_fraction), f"flagged={flagged}"])
                doc.append({"setting": setting, "method": method, "label": "MACRO", **macro.as_dict(), "flagged_labels": flagged})
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    (out / "metrics.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _write_tables(out: Path, results, labels) -> None:
    for setting, fname in TABLE_FILES.items():
        with open(out / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["model", "accuracy", "f1", "precision", "recall", "kappa"]
            if setting != "unfiltered":
                cols += ["excluded_cases_mean", "excluded_pct", "flagged_labels"]
            w.writerow(cols)
            for method, per_label in results.items():
                macro, flagged = _macro(per_label, labels, setting)
                if macro is None:
                    w.writerow([method, *["nan"] * 5] + (["nan", "nan", flagged] if setting != "unfiltered" else []))
                    continue
                row = [method, *[_fmt(getattr(macro, m)) for m in METRIC_NAMES]]
                if setting != "unfiltered":
                    exc = [per_label[l].records[setting].excluded_cases for l in labels]
                    frac = [per_label[l].records[setting].excluded_fraction for l in labels]
                    row += [f"{np.mean(exc):.2f}", f"{100 * np.mean(frac):.2f}", flagged]
                w.writerow(row)


def table_text(path: Path) -> str:
    """Plain aligned rendering of a CSV table for terminal output."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in rows) + "\n"
