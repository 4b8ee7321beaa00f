"""Ranking and threshold metrics for multi-label predictions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep ascending original index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, targets) -> float:
    """Non-interpolated AP; ``nan`` when there is no positive target."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise ValueError("scores and targets must be 1-D arrays of equal length")
    n_pos = int(targets.sum())
    if n_pos == 0:
        return float("nan")
    hits = targets[ranking_order(scores)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class F1Result:
    of1: float
    cf1: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def precision(self) -> np.ndarray:
        pred = self.tp + self.fp
        return np.where(pred > 0, self.tp / np.maximum(pred, 1), 0.0)

    @property
    def recall(self) -> np.ndarray:
        actual = self.tp + self.fn
        return np.where(actual > 0, self.tp / np.maximum(actual, 1), 0.0)


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def f1_scores(prob, labels, threshold: float = 0.5) -> F1Result:
    """Overall (micro) and per-class (macro) F1 at ``prob >= threshold``.

    A class with neither predicted nor actual positives has F1 = 1.
    """
    prob = np.asarray(prob.data if isinstance(prob, T.Tensor) else prob, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels == 0):
        raise ValueError("F1 needs fully known labels")
    pred = prob >= threshold
    actual = labels == 1
    tp = (pred & actual).sum(axis=0)
    fp = (pred & ~actual).sum(axis=0)
    fn = (~pred & actual).sum(axis=0)
    of1 = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    cf1 = float(np.mean([_f1(a, b, d) for a, b, d in zip(tp, fp, fn)]))
    return F1Result(of1, cf1, tp, fp, fn)


@dataclass
class MetricsReport:
    per_class_ap: np.ndarray
    map: float
    of1: float
    cf1: float
    precision: np.ndarray
    recall: np.ndarray
    threshold: float
    excluded: list[int]

    def csv_row(self, run_id: str, setting: str, ratio: float, seed: int) -> list[str]:
        values = [self.map, self.of1, self.cf1, *self.per_class_ap]
        return [run_id, setting, _fmt(ratio), str(seed), *(_fmt(v) for v in values)]

    def to_csv(self, run_id: str, setting: str, ratio: float, seed: int,
               header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(csv_header(len(self.per_class_ap)))
        writer.writerow(self.csv_row(run_id, setting, ratio, seed))
        return buf.getvalue()


def csv_header(n_categories: int) -> list[str]:
    return ["run_id", "setting", "ratio", "seed", "mAP", "OF1", "CF1",
            *(f"AP_{c}" for c in range(n_categories))]


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def metrics_from_scores(logits, labels, threshold: float = 0.5) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    prob = T._sigmoid(logits)
    ap = np.array([average_precision(logits[:, c], labels[:, c] == 1)
                   for c in range(labels.shape[1])])
    excluded = [int(c) for c in np.flatnonzero(np.isnan(ap))]
    included = ap[~np.isnan(ap)]
    f1 = f1_scores(prob, labels, threshold)
    return MetricsReport(ap, float(np.mean(included)) if len(included) else float("nan"),
                         f1.of1, f1.cf1, f1.precision, f1.recall, threshold, excluded)


def predict_logits(model, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits; the model's train/eval flag is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            chunks = [model(T.Tensor(features[i:i + batch_size])).data
                      for i in range(0, len(features), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)


def evaluate(model, dataset, threshold: float = 0.5) -> MetricsReport:
    """Score ``dataset`` (fully labeled) and assemble mAP/OF1/CF1.

    AP is ranked on logits, which orders samples exactly like probabilities
    without the saturation ties of the sigmoid.
    """
    if dataset.n_samples == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if np.any(dataset.labels == 0):
        raise ValueError("evaluation labels must be fully known")
    return metrics_from_scores(predict_logits(model, dataset.features), dataset.labels, threshold)
