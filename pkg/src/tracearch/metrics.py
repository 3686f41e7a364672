"""Evaluation metrics: edit-distance accuracy, segment accuracy, P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .archspec import BACKGROUND


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Minimum number of insertions/deletions/substitutions turning a into b."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def lda(pred_seq: Sequence, true_seq: Sequence) -> float:
    """1 - normalized edit distance; 1.0 for an exact (or doubly empty) match."""
    longest = max(len(pred_seq), len(true_seq))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred_seq, true_seq) / longest


def sa(pred_labels, true_labels, background: int = BACKGROUND) -> float:
    """Fraction of correctly labeled samples, ignoring background truth."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"label length mismatch: {pred.shape} vs {true.shape}")
    keep = true != background
    if not keep.any():
        return 1.0
    return float((pred[keep] == true[keep]).mean())


@dataclass
class LabelScore:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
        }


def prf1(pred, true, label_set: Sequence) -> dict:
    """One-vs-rest precision/recall/F1 per label plus a support-weighted average.

    Labels with zero true support are reported but excluded from the average.
    """
    pred = list(pred)
    true = list(true)
    if len(pred) != len(true):
        raise ValueError("pred and true must have equal length")
    per_label: dict = {}
    for label in label_set:
        tp = sum(1 for p, t in zip(pred, true) if p == label and t == label)
        fp = sum(1 for p, t in zip(pred, true) if p == label and t != label)
        fn = sum(1 for p, t in zip(pred, true) if p != label and t == label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_label[label] = LabelScore(precision, recall, f1, tp + fn)

    supported = [s for s in per_label.values() if s.support > 0]
    total = sum(s.support for s in supported)
    if total:
        avg = LabelScore(
            precision=sum(s.precision * s.support for s in supported) / total,
            recall=sum(s.recall * s.support for s in supported) / total,
            f1=sum(s.f1 * s.support for s in supported) / total,
            support=total,
        )
    else:
        avg = LabelScore(0.0, 0.0, 0.0, 0)
    return {"per_label": per_label, "weighted": avg}


@dataclass
class EvalReport:
    """Aggregate attack scores over a corpus."""

    sa: Optional[float] = None
    lda: Optional[float] = None
    per_class: dict = field(default_factory=dict)
    per_hyper: dict = field(default_factory=dict)
    weighted: Optional[LabelScore] = None
    counts: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def scores_dict(scores):
            return {
                "per_label": {str(k): v.to_dict() for k, v in scores["per_label"].items()},
                "weighted": scores["weighted"].to_dict(),
            }

        return {
            "sa": self.sa,
            "lda": self.lda,
            "per_class": {str(k): scores_dict(v) for k, v in self.per_class.items()},
            "per_hyper": {str(k): scores_dict(v) for k, v in self.per_hyper.items()},
            "weighted": self.weighted.to_dict() if self.weighted else None,
            "counts": self.counts,
            "extras": self.extras,
        }

    def render(self) -> str:
        """Aligned text tables, one row per class/hyperparameter."""
        lines = []
        if self.sa is not None or self.lda is not None:
            lines.append("structure recovery")
            if self.sa is not None:
                lines.append(f"  SA  {self.sa * 100:6.2f}%")
            if self.lda is not None:
                lines.append(f"  LDA {self.lda * 100:6.2f}%")
        if self.per_hyper:
            lines.append("hyperparameter inference")
            lines.append(f"  {'target':<14}{'prec%':>8}{'rec%':>8}{'f1%':>8}{'n':>8}")
            for name, scores in self.per_hyper.items():
                w = scores["weighted"]
                lines.append(
                    f"  {name:<14}{w.precision * 100:8.2f}{w.recall * 100:8.2f}"
                    f"{w.f1 * 100:8.2f}{w.support:8d}"
                )
            if self.weighted:
                w = self.weighted
                lines.append(
                    f"  {'weighted avg':<14}{w.precision * 100:8.2f}{w.recall * 100:8.2f}"
                    f"{w.f1 * 100:8.2f}{w.support:8d}"
                )
        return "\n".join(lines)
