"""Per-class precision / recall / F1 with micro and macro averages."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scene import CLASSES, NUM_CLASSES

_KEYS = ("precision", "recall", "f1")


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int]) -> np.ndarray:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


@dataclass
class EvalReport:
    """Metrics in percent, kept at full precision.

    ``per_class`` maps class name -> {precision, recall, f1, support}.
    Classes without support have recall/f1 of None and are left out of the
    macro average; with ``drop_absent`` they are omitted entirely.
    """

    method: str
    per_class: dict[str, dict]
    micro: dict[str, float]
    macro: dict[str, float]
    confusion: list[list[int]]
    runs: list[dict] = field(default_factory=list)
    attention: Optional[list[list[Optional[float]]]] = None
    meta: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return self.macro["f1"]

    def recall(self, cls: str) -> Optional[float]:
        row = self.per_class.get(cls)
        return None if row is None else row["recall"]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "per_class": self.per_class,
            "micro": self.micro,
            "macro": self.macro,
            "confusion": self.confusion,
            "runs": self.runs,
            "attention": self.attention,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["method"], d["per_class"], d["micro"], d["macro"], d["confusion"],
                   d.get("runs", []), d.get("attention"), d.get("meta", {}))

    def table(self) -> str:
        """Rounded precision/recall/F1 table, one row per class plus micro and macro."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for name, row in self.per_class.items():
            w.writerow([name] + [_fmt(row[k]) for k in _KEYS] + [row["support"]])
        w.writerow(["micro avg"] + [_fmt(self.micro[k]) for k in _KEYS] + [""])
        w.writerow(["macro avg"] + [_fmt(self.macro[k]) for k in _KEYS] + [""])
        return out.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.2f}"


def _clean(obj):
    """NaN -> None so the JSON stays standard."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def compute_report(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    method: str,
    drop_absent: bool = False,
) -> EvalReport:
    if len(y_true) == 0:
        raise ValueError("no labelled vehicles to evaluate")
    cm = confusion_matrix(y_true, y_pred)
    per_class = {}
    for c, cls in enumerate(CLASSES):
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        tp = int(cm[c, c])
        if support == 0 and drop_absent:
            continue
        precision = 100.0 * tp / predicted if predicted else 0.0
        if support:
            recall = 100.0 * tp / support
            f1 = _f1(precision, recall)
        else:
            recall = f1 = None
        per_class[cls.value] = {"precision": precision, "recall": recall, "f1": f1, "support": support}
    if drop_absent:
        present = [cls.index for cls in CLASSES if cls.value in per_class]
        sub = cm[np.ix_(present, present)]
        # predictions into dropped classes still count as errors
        tp = int(np.trace(sub))
        n = int(cm[present].sum())
        n_pred = n
    else:
        tp, n, n_pred = int(np.trace(cm)), int(cm.sum()), int(cm.sum())
    micro_p = 100.0 * tp / n_pred
    micro_r = 100.0 * tp / n
    micro = {"precision": micro_p, "recall": micro_r, "f1": _f1(micro_p, micro_r)}
    scored = [row for row in per_class.values() if row["support"] > 0]
    macro = {k: float(np.mean([row[k] for row in scored])) for k in _KEYS}
    return EvalReport(method, per_class, micro, macro, cm.tolist())


def mean_report(reports: Sequence[EvalReport], method: str | None = None) -> EvalReport:
    """Average of several runs' reports; per-run summaries kept in ``runs``."""
    if not reports:
        raise ValueError("no reports to average")
    names = list(reports[0].per_class)
    per_class = {}
    for name in names:
        row = {}
        for k in _KEYS:
            vals = [r.per_class[name][k] for r in reports if r.per_class.get(name, {}).get(k) is not None]
            row[k] = float(np.mean(vals)) if vals else None
        row["support"] = reports[0].per_class[name]["support"]
        per_class[name] = row
    micro = {k: float(np.mean([r.micro[k] for r in reports])) for k in _KEYS}
    macro = {k: float(np.mean([r.macro[k] for r in reports])) for k in _KEYS}
    confusion = np.sum([np.asarray(r.confusion) for r in reports], axis=0).tolist()
    runs = [
        {"micro": r.micro, "macro": r.macro, "recall": {n: r.per_class[n]["recall"] for n in r.per_class}, **r.meta}
        for r in reports
    ]
    return EvalReport(method or reports[0].method, per_class, micro, macro, confusion, runs)
