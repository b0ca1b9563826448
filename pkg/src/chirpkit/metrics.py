"""Evaluation metrics: per-class and macro precision/recall/F_beta and
top-k accuracy (global or class-averaged). All pure functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError


def fbeta(precision: float, recall: float, beta: float = 0.5) -> float:
    """(1+b^2) p r / (b^2 p + r); 0 by convention when p = r = 0."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise DataError("precision and recall must be in [0,1]")
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + b2) * precision * recall / denom


@dataclass
class ConfusionTable:
    """Per-class TP/FP/FN counts keyed by class_id."""
    tp: dict[str, int] = field(default_factory=dict)
    fp: dict[str, int] = field(default_factory=dict)
    fn: dict[str, int] = field(default_factory=dict)
    pair_counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def classes(self) -> list[str]:
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    @staticmethod
    def from_predictions(predicted: Sequence[str],
                         truth: Sequence[str]) -> "ConfusionTable":
        if len(predicted) != len(truth):
            raise DataError("predicted and truth lengths differ")
        t = ConfusionTable()
        for cid in set(predicted) | set(truth):
            t.tp[cid] = t.fp[cid] = t.fn[cid] = 0
        for p, y in zip(predicted, truth):
            t.pair_counts[(y, p)] = t.pair_counts.get((y, p), 0) + 1
            if p == y:
                t.tp[y] += 1
            else:
                t.fp[p] += 1
                t.fn[y] += 1
        return t

    def to_csv(self) -> str:
        classes = self.classes()
        lines = ["truth\\predicted," + ",".join(classes)]
        for y in classes:
            row = [str(self.pair_counts.get((y, p), 0)) for p in classes]
            lines.append(f"{y}," + ",".join(row))
        return "\n".join(lines) + "\n"


def per_class_metrics(table: ConfusionTable, beta: float = 0.5) -> dict:
    """Per-class precision/recall/f and equal-weight macro means.

    Classes with no test samples (tp+fn = 0) are excluded from the macro
    averages and listed separately. A class nothing was predicted as
    gets precision 0 with an explicit flag rather than NaN.
    """
    per_class: dict[str, dict] = {}
    excluded: list[str] = []
    for cid in table.classes():
        tp = table.tp.get(cid, 0)
        fp = table.fp.get(cid, 0)
        fn = table.fn.get(cid, 0)
        if tp < 0 or fp < 0 or fn < 0:
            raise DataError(f"negative counts for class {cid!r}")
        if tp + fn == 0:
            excluded.append(cid)
            continue
        no_preds = (tp + fp) == 0
        p = 0.0 if no_preds else tp / (tp + fp)
        r = tp / (tp + fn)
        per_class[cid] = {"precision": p, "recall": r,
                          "f": fbeta(p, r, beta),
                          "support": tp + fn,
                          "no_predictions": no_preds}
    macro = {}
    if per_class:
        for key in ("precision", "recall", "f"):
            macro[key] = float(np.mean([m[key] for m in per_class.values()]))
    return {"per_class": per_class, "macro": macro,
            "excluded_no_support": excluded, "beta": beta}


def topk_accuracy(ranked: Sequence[Sequence[str]], truths: Sequence[str],
                  k: int, averaging: str = "global") -> float:
    """Hit iff the truth appears in the top k of the ranked prediction
    list. `global` averages over samples; `class` averages the per-class
    means so every class weighs equally."""
    if k < 1:
        raise DataError("k must be >= 1")
    if len(ranked) != len(truths):
        raise DataError("ranked and truths lengths differ")
    if not truths:
        raise DataError("no samples")
    hits: Mapping[str, list[int]] = {}
    for preds, y in zip(ranked, truths):
        hits.setdefault(y, []).append(1 if y in list(preds)[:k] else 0)
    if averaging == "global":
        all_hits = [h for hs in hits.values() for h in hs]
        return float(np.mean(all_hits))
    if averaging == "class":
        return float(np.mean([np.mean(hs) for hs in hits.values()]))
    raise DataError(f"unknown averaging {averaging!r}")


def metrics_to_csv(report: dict) -> str:
    lines = ["class_id,precision,recall,f,support,no_predictions"]
    for cid, m in sorted(report["per_class"].items()):
        lines.append(f"{cid},{m['precision']:.6f},{m['recall']:.6f},"
                     f"{m['f']:.6f},{m['support']},{int(m['no_predictions'])}")
    if report["macro"]:
        mac = report["macro"]
        lines.append(f"MACRO,{mac['precision']:.6f},{mac['recall']:.6f},"
                     f"{mac['f']:.6f},,")
    return "\n".join(lines) + "\n"
