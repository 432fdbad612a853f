"""Evaluation reports: accuracy, macro F1, confusion matrix, inference timing."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from .model import ClassifierModel, LabeledVectors, _check_input, predict, predict_proba


@dataclass
class EvalReport:
    classes: list
    confusion: np.ndarray
    mean_inference_s: float = 0.0
    std_inference_s: float = 0.0

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def per_class_accuracy(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)

    @property
    def macro_f1(self) -> float:
        return macro_f1(self.confusion)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "classes": list(self.classes),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
        }
        if include_timing:
            out["mean_inference_s"] = self.mean_inference_s
            out["std_inference_s"] = self.std_inference_s
        return out


def confusion_matrix(y_true, y_pred, classes) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(np.asarray(y_true, dtype=object).tolist(), np.asarray(y_pred, dtype=object).tolist()):
        cm[index[t], index[p]] += 1
    return cm


def macro_f1(confusion) -> float:
    """Unweighted mean of per-class F1 over classes that occur as truth or prediction."""
    cm = np.asarray(confusion, dtype=float)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    present = denom > 0
    if not np.any(present):
        return 0.0
    return float(np.mean(2 * tp[present] / denom[present]))


def time_single_predictions(fn, inputs, repeats: int = 1):
    """Wall-clock seconds of ``fn(x)`` per row of ``inputs``."""
    times = []
    for _ in range(repeats):
        for x in inputs:
            t0 = time.perf_counter()
            fn(x)
            times.append(time.perf_counter() - t0)
    return np.array(times)


def evaluate(model: ClassifierModel, test: LabeledVectors, timing_samples: int = 1000) -> EvalReport:
    """Frame-level report; timing covers up to ``timing_samples`` single-row predict calls."""
    if len(test) == 0:
        raise ParameterError("test set is empty")
    X = _check_input(model, test.X)
    unknown = set(test.y.tolist()) - set(model.classes)
    if unknown:
        raise ParameterError(f"test labels unknown to the model: {sorted(unknown)}")
    pred = predict(model, X)
    cm = confusion_matrix(test.y, pred, model.classes)
    report = EvalReport(list(model.classes), cm)
    if timing_samples > 0:
        t = time_single_predictions(lambda x: predict(model, x), X[:timing_samples])
        report.mean_inference_s = float(t.mean())
        report.std_inference_s = float(t.std())
    return report


def within_pair_accuracy(model: ClassifierModel, test: LabeledVectors, partner: dict) -> float:
    """Share of rows whose true class outscores its designated partner class.

    ``partner`` maps each class name to the one it is confused with by
    construction (e.g. the other member of a real/fake pair); only those two
    probabilities are compared, so chance level is 0.5.
    """
    if len(test) == 0:
        raise ParameterError("test set is empty")
    index = {c: i for i, c in enumerate(model.classes)}
    missing = {c for c in set(test.y.tolist()) if c not in index or partner.get(c) not in index}
    if missing:
        raise ParameterError(f"no partner class known for {sorted(missing)}")
    P = predict_proba(model, _check_input(model, test.X))
    P = np.atleast_2d(P)
    own = np.array([index[c] for c in test.y.tolist()])
    other = np.array([index[partner[c]] for c in test.y.tolist()])
    rows = np.arange(len(own))
    return float(np.mean(P[rows, own] > P[rows, other]))


def write_confusion_csv(path, report: EvalReport) -> None:
    lines = ["true\\pred," + ",".join(report.classes)]
    for c, row in zip(report.classes, report.confusion):
        lines.append(c + "," + ",".join(str(int(v)) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
