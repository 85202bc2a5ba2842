"""Session accuracies, summary statistics and report files."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ContractError, DomainError

DECIMALS = 6


def session_accuracy(predictions, labels):
    """Percentage of predictions equal to their labels."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ContractError("predictions and labels must be 1-D and of equal length")
    if p.size == 0:
        raise ContractError("session_accuracy of an empty set")
    return 100.0 * np.count_nonzero(p == y) / p.size


def average_accuracy(accuracies):
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ContractError("average_accuracy needs at least one session")
    return float(acc.mean())


def harmonic_accuracy(base_acc, inc_acc):
    """``2 b i / (b + i)``."""
    if base_acc <= 0 or inc_acc <= 0:
        raise DomainError("harmonic accuracy needs strictly positive inputs")
    return 2.0 * base_acc * inc_acc / (base_acc + inc_acc)


def delta_imp(avg_acc, baseline_avg):
    return avg_acc - baseline_avg


def confusion_matrix(predictions, labels, n_classes):
    """Counts with rows = truth, columns = prediction."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ContractError("predictions and labels must have equal length")
    for name, arr in (("label", y), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"{name} out of range for {n_classes} classes")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


@dataclass
class SessionReport:
    mode: str
    session_acc: List[float]
    n_seen: List[int]
    base_acc: float
    inc_acc: Optional[float] = None
    harmonic: Optional[float] = None
    baseline: Optional[str] = None
    delta_imp: Optional[float] = None
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    text: Optional[dict] = None  # text-side diagnostics; absent for visual-only runs

    @property
    def average(self):
        return average_accuracy(self.session_acc)

    @property
    def last(self):
        return self.session_acc[-1]

    def with_baseline(self, name, baseline_avg):
        self.baseline = name
        self.delta_imp = delta_imp(self.average, baseline_avg)
        return self

    def to_json(self):
        r = _rounder
        doc = {
            "mode": self.mode,
            "sessions": [{"session": s + 1, "n_classes": n, "accuracy": r(a)}
                         for s, (a, n) in enumerate(zip(self.session_acc, self.n_seen))],
            "average_accuracy": r(self.average),
            "base_accuracy": r(self.base_acc),
            "incremental_accuracy": r(self.inc_acc),
            "harmonic_accuracy": r(self.harmonic),
            "baseline": self.baseline,
            "delta_imp": r(self.delta_imp),
            "confusion": self.confusion.tolist(),
        }
        if self.text is not None:
            doc["text"] = {k: r(v) for k, v in sorted(self.text.items())}
        return doc

    @classmethod
    def from_json(cls, doc):
        sessions = doc["sessions"]
        return cls(
            mode=doc["mode"],
            session_acc=[float(s["accuracy"]) for s in sessions],
            n_seen=[int(s["n_classes"]) for s in sessions],
            base_acc=float(doc["base_accuracy"]),
            inc_acc=doc["incremental_accuracy"],
            harmonic=doc["harmonic_accuracy"],
            baseline=doc["baseline"],
            delta_imp=doc["delta_imp"],
            confusion=np.asarray(doc["confusion"], dtype=np.int64).reshape(
                len(doc["confusion"]), -1),
            text=doc.get("text"),
        )


def _rounder(x):
    return None if x is None else round(float(x), DECIMALS)


def build_report(mode, session_acc, n_seen, base_acc, inc_acc, confusion, text=None):
    """Assemble a report; harmonic accuracy is absent when there is no incremental score."""
    har = None
    if inc_acc is not None and base_acc > 0 and inc_acc > 0:
        har = harmonic_accuracy(base_acc, inc_acc)
    return SessionReport(mode, list(map(float, session_acc)), list(n_seen), float(base_acc),
                         inc_acc, har, confusion=confusion, text=text)


def write_report(report: SessionReport, path):
    """Write ``<path>.json`` and ``<path>.csv``; returns both paths."""
    path = Path(path)
    js, cs = path.with_suffix(".json"), path.with_suffix(".csv")
    js.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with cs.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session", "n_classes", "accuracy"])
        for s, (a, n) in enumerate(zip(report.session_acc, report.n_seen)):
            w.writerow([s + 1, n, f"{a:.{DECIMALS}f}"])
    return js, cs


def read_report(path) -> SessionReport:
    return SessionReport.from_json(json.loads(Path(path).with_suffix(".json").read_text()))


def write_confusion(matrix, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth"] + [f"pred_{k}" for k in range(matrix.shape[1])])
        for t, row in enumerate(matrix):
            w.writerow([t] + [int(v) for v in row])
