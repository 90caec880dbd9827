"""Classification metrics and the single/mixed evaluation protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import predict

__all__ = [
    "EvalReport",
    "accuracy",
    "top1",
    "f1_scores",
    "micro_f1",
    "macro_f1",
    "per_class_scores",
    "confusion_matrix",
    "predict_scores",
    "evaluate_single",
    "evaluate_mixed",
]


def top1(scores: np.ndarray) -> np.ndarray:
    """Arg-max class per row; ``np.argmax`` already resolves ties to the lowest index."""
    return np.argmax(np.asarray(scores), axis=1)


def accuracy(preds, truths) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if preds.shape != truths.shape:
        raise ValueError(f"prediction shape {preds.shape} != truth shape {truths.shape}")
    return float(np.mean(preds == truths))


def _counts(preds, truths):
    p = np.asarray(preds, dtype=bool)
    t = np.asarray(truths, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = np.sum(p & t, axis=0)
    fp = np.sum(p & ~t, axis=0)
    fn = np.sum(~p & t, axis=0)
    return tp, fp, fn


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    # nothing to find and nothing predicted counts as perfect
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)


def f1_scores(preds, truths) -> tuple[float, float]:
    """``(micro, macro)`` F1 of multi-hot predictions."""
    tp, fp, fn = _counts(preds, truths)
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    macro = float(np.mean(_f1(tp, fp, fn))) if tp.size else 1.0
    return micro, macro


def micro_f1(preds, truths) -> float:
    return f1_scores(preds, truths)[0]


def macro_f1(preds, truths) -> float:
    return f1_scores(preds, truths)[1]


def per_class_scores(preds, truths):
    """Per-class ``(precision, recall, f1, support)`` arrays."""
    tp, fp, fn = _counts(preds, truths)
    precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 1.0)
    return precision, recall, _f1(tp, fp, fn), tp + fn


def confusion_matrix(preds, truths, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truths), np.asarray(preds)), 1)
    return cm


@dataclass
class EvalReport:
    micro_f1: float
    macro_f1: float
    threshold: float
    species: list
    per_class: list = field(default_factory=list)
    accuracy: float | None = None
    confusion: list | None = None
    num_samples: int = 0

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def write_confusion_csv(self, path) -> None:
        if self.confusion is None:
            raise ValueError("confusion matrix is only defined for single-species evaluation")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\predicted"] + list(self.species))
            for name, row in zip(self.species, self.confusion):
                w.writerow([name] + list(row))


def predict_scores(model, stream) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid scores and truth labels over a whole stream (inference mode)."""
    scores, truth = [], []
    with ad.no_record():
        for patches, mask, labels in stream.batches(0):
            scores.append(predict(model(patches, mask, training=False))[1])
            truth.append(np.asarray(labels, dtype=bool))
    if not scores:
        return np.zeros((0, model.config.num_classes)), np.zeros((0, model.config.num_classes), bool)
    return np.concatenate(scores), np.concatenate(truth)


def _report(scores, truth, threshold, species, single: bool) -> EvalReport:
    if len(scores) == 0:
        raise ValueError("evaluation stream is empty")
    preds = scores > threshold
    micro, macro = f1_scores(preds, truth)
    prec, rec, f1, support = per_class_scores(preds, truth)
    names = list(species) if species is not None else [str(i) for i in range(truth.shape[1])]
    rows = [
        {"species": n, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for n, p, r, f, s in zip(names, prec, rec, f1, support)
    ]
    report = EvalReport(micro, macro, float(threshold), names, rows, num_samples=len(scores))
    if single:
        if np.any(truth.sum(axis=1) != 1):
            raise ValueError("single-species evaluation needs exactly one true label per sample")
        t = np.argmax(truth, axis=1)
        p = top1(scores)
        report.accuracy = accuracy(p, t)
        report.confusion = confusion_matrix(p, t, truth.shape[1]).tolist()
    return report


def evaluate_single(model, stream, threshold: float = 0.5, species=None) -> EvalReport:
    """Accuracy (arg-max) plus thresholded F1 on a one-label-per-sample stream."""
    scores, truth = predict_scores(model, stream)
    return _report(scores, truth, threshold, species, single=True)


def evaluate_mixed(model, stream, threshold: float = 0.5, species=None) -> EvalReport:
    """Micro/macro F1 on a multi-label stream; accuracy is left undefined."""
    scores, truth = predict_scores(model, stream)
    return _report(scores, truth, threshold, species, single=False)
