"""Report datasets: loading, label binarization, label selection and splits."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

VALID_CODES = frozenset({0, 1, 2, 9})
DEFAULT_MIN_POSITIVES = 15


class CorpusError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class RadiologyReport:
    report_id: str
    text: str
    labels: Mapping[str, int]
    patient_id: str | None = None

    def to_json(self) -> dict:
        out = {"report_id": self.report_id}
        if self.patient_id is not None:
            out["patient_id"] = self.patient_id
        out["text"] = self.text
        out["labels"] = dict(self.labels)
        return out


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of reports with unique ids.

    ``binary`` is True once label codes have been collapsed to 0/1.
    """

    reports: tuple[RadiologyReport, ...]
    binary: bool = False
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for r in self.reports:
            if r.report_id in index:
                raise CorpusError(f"duplicate id: {r.report_id!r}")
            index[r.report_id] = r
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.reports)

    def __iter__(self):
        return iter(self.reports)

    def __getitem__(self, report_id: str) -> RadiologyReport:
        return self._index[report_id]

    @property
    def ids(self) -> list[str]:
        return [r.report_id for r in self.reports]

    @property
    def label_names(self) -> list[str]:
        names = set()
        for r in self.reports:
            names.update(r.labels)
        return sorted(names)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset(tuple(self._index[i] for i in ids), binary=self.binary)

    def truth(self, report_id: str, label: str) -> bool:
        """Binary ground truth; raw code 1 is the only positive."""
        return self._index[report_id].labels.get(label, 0) == 1


def load_dataset(path: str | Path) -> Dataset:
    """Read a line-delimited JSON dataset, preserving file order."""
    reports = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = obj["report_id"]
                text = obj["text"]
                labels = obj["labels"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: malformed record on line {lineno}: {exc}") from exc
            if not isinstance(rid, str) or not isinstance(text, str) or not isinstance(labels, dict):
                raise CorpusError(f"{path}: malformed record on line {lineno}: bad field types")
            if not text:
                raise CorpusError(f"{path}: empty report text on line {lineno}")
            if rid in seen:
                raise CorpusError(f"{path}: duplicate id {rid!r} on line {lineno}")
            seen.add(rid)
            codes = {}
            for name, code in labels.items():
                if not isinstance(code, int) or isinstance(code, bool):
                    raise CorpusError(f"{path}: non-integer code for {name!r} on line {lineno}")
                codes[name] = code
            reports.append(
                RadiologyReport(report_id=rid, text=text, labels=codes, patient_id=obj.get("patient_id"))
            )
    return Dataset(tuple(reports))


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in dataset:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=False) + "\n")


def binarize_labels(dataset: Dataset) -> Dataset:
    """Collapse raw codes to binary: 1 stays positive, 0/2/9 become 0."""
    out = []
    for r in dataset:
        codes = {}
        for name, code in r.labels.items():
            if code not in VALID_CODES:
                raise CorpusError(f"report {r.report_id!r}, label {name!r}: invalid code {code}")
            codes[name] = 1 if code == 1 else 0
        out.append(RadiologyReport(r.report_id, r.text, codes, r.patient_id))
    return Dataset(tuple(out), binary=True)


def positive_counts(dataset: Dataset) -> dict[str, int]:
    counts: Counter = Counter({name: 0 for name in dataset.label_names})
    for r in dataset:
        for name, code in r.labels.items():
            if code == 1:
                counts[name] += 1
    return dict(sorted(counts.items()))


def select_labels(dataset: Dataset, min_positives: int = DEFAULT_MIN_POSITIVES) -> list[str]:
    """Labels with strictly more than ``min_positives`` positive cases, sorted by name."""
    return [name for name, n in positive_counts(dataset).items() if n > min_positives]


def build_manifest(dataset: Dataset, min_positives: int = DEFAULT_MIN_POSITIVES) -> dict:
    counts = positive_counts(dataset)
    return {
        "n_reports": len(dataset),
        "positive_counts": counts,
        "min_positives": min_positives,
        "selected_labels": [n for n, c in counts.items() if c > min_positives],
    }


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor allocation for validation/test; the remainder goes to train."""
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_test = int(np.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_dataset(
    dataset: Dataset, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> DatasetSplit:
    if len(dataset) == 0:
        raise CorpusError("cannot split an empty dataset")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_train, n_val, _ = split_sizes(len(dataset), fractions)
    order = np.random.default_rng(seed).permutation(len(dataset))
    ids = dataset.ids
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train_ids=tuple(shuffled[:n_train]),
        validation_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val :]),
        seed=seed,
    )


def holdout_tuning_subset(dataset: Dataset, n: int, seed: int = 0) -> list[str]:
    """Uniform random sample of ``n`` ids without replacement, in dataset order."""
    if n > len(dataset):
        raise CorpusError(f"tuning subset of {n} requested from {len(dataset)} reports")
    if n < 0:
        raise CorpusError("tuning subset size must be nonnegative")
    picked = np.random.default_rng(seed).choice(len(dataset), size=n, replace=False)
    ids = dataset.ids
    return [ids[i] for i in sorted(picked)]
