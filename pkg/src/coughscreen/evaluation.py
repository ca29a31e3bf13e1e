"""Screening metrics: confusion counts, derived rates, ROC/AUC, CV, grouped levels."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyGroup, EmptyInput, LengthMismatch, SingleClass
from .model import aggregate_recording

LEVELS = ("chunk", "file", "individual")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float = 0
    fp: float = 0
    tn: float = 0
    fn: float = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(labels: Sequence[bool], predictions: Sequence[bool]) -> ConfusionMatrix:
    if len(labels) != len(predictions):
        raise LengthMismatch(f"{len(labels)} labels vs {len(predictions)} predictions")
    if len(labels) == 0:
        raise EmptyInput("confusion matrix of zero samples")
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(predictions, dtype=bool)
    return ConfusionMatrix(
        tp=int(np.sum(y & p)), fp=int(np.sum(~y & p)), tn=int(np.sum(~y & ~p)), fn=int(np.sum(y & ~p))
    )


def _ratio(num, den) -> Optional[float]:
    return None if den == 0 else num / den


def metrics(m: ConfusionMatrix) -> dict:
    """Accuracy, sensitivity, specificity, precision and F1.

    A metric whose denominator is zero is ``None`` (absent), never NaN.
    """
    sens = _ratio(m.tp, m.tp + m.fn)
    prec = _ratio(m.tp, m.tp + m.fp)
    if sens is None or prec is None or sens + prec == 0:
        f1 = None
    else:
        f1 = 2 * prec * sens / (prec + sens)
    return {
        "accuracy": _ratio(m.tp + m.tn, m.total),
        "sensitivity": sens,
        "specificity": _ratio(m.tn, m.tn + m.fp),
        "precision": prec,
        "f1": f1,
    }


def implied_precision(recall: float, f1: float) -> float:
    """Precision that yields ``f1`` together with ``recall`` (inverse of the F1 identity)."""
    return recall * f1 / (2 * recall - f1)


def roc_auc(labels: Sequence[bool], scores: Sequence[float]):
    """ROC points and trapezoidal AUC.

    Thresholds sweep every distinct score from high to low, predicting
    positive when ``score >= threshold``. The first point is ``(0, 0, inf)``
    and the last is ``(1, 1, min score)``. Tied scores move both rates at
    once, so the area counts ties as one half.

    Returns:
        ``([(fpr, tpr, threshold), ...], auc)``
    """
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise LengthMismatch("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tps = np.cumsum(y_sorted)[distinct]
    fps = np.cumsum(~y_sorted)[distinct]
    points = [(0.0, 0.0, math.inf)]
    points += [(fp / n_neg, tp / n_pos, float(s_sorted[i])) for tp, fp, i in zip(tps, fps, distinct)]
    # integrate in counts to keep the sum exact until the final division
    area = 0.0
    prev_tp = prev_fp = 0
    for tp, fp in zip(tps, fps):
        area += (fp - prev_fp) * (tp + prev_tp)
        prev_tp, prev_fp = tp, fp
    return points, area / (2.0 * n_pos * n_neg)


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    f1: Optional[float]
    auc: Optional[float] = None
    roc_points: list = field(default_factory=list)
    level: str = "chunk"
    n_samples: int = 0
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "matrix": self.matrix.to_dict(),
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "auc": self.auc,
            "roc_points": [[f, t, None if math.isinf(th) else th] for f, t, th in self.roc_points],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def roc_csv(self) -> str:
        lines = ["fpr,tpr,threshold"]
        for f, t, th in self.roc_points:
            lines.append(f"{f!r},{t!r},{'inf' if math.isinf(th) else repr(th)}")
        return "\n".join(lines) + "\n"


def report_from_matrix(m: ConfusionMatrix, level: str = "chunk") -> EvalReport:
    return EvalReport(matrix=m, level=level, n_samples=int(round(m.total)), **metrics(m))


def evaluate(labels: Sequence[bool], scores: Sequence[float], threshold: float = 0.5, level: str = "chunk") -> EvalReport:
    """Thresholded report plus ROC/AUC (AUC is None when one class is missing)."""
    preds = [s >= threshold for s in scores]
    m = confusion(labels, preds)
    rep = report_from_matrix(m, level)
    rep.threshold = threshold
    if 0 < sum(bool(v) for v in labels) < len(labels):
        rep.roc_points, rep.auc = roc_auc(labels, scores)
    return rep


@dataclass(frozen=True)
class ScoredChunk:
    individual_id: str
    file_id: str
    label: bool
    score: float


def evaluate_levels(chunks: Sequence[ScoredChunk], policy: str = "mean", threshold: float = 0.5,
                    levels: Sequence[str] = LEVELS) -> dict[str, EvalReport]:
    """Reports at chunk, file and individual level.

    Chunk level uses raw scores. File and individual levels aggregate the
    chunk scores of each group with ``aggregate_recording``; a group's label
    is positive if any of its chunks is labeled positive.
    """
    if not chunks:
        raise EmptyGroup("no scored chunks")
    out = {}
    for level in levels:
        if level == "chunk":
            out[level] = evaluate([c.label for c in chunks], [c.score for c in chunks], threshold, "chunk")
            continue
        key = (lambda c: c.file_id) if level == "file" else (lambda c: c.individual_id)
        groups: OrderedDict = OrderedDict()
        for c in chunks:
            if not key(c):
                raise EmptyGroup(f"chunk without a {level} id")
            groups.setdefault(key(c), []).append(c)
        labels, scores = [], []
        for members in groups.values():
            _, score = aggregate_recording([c.score for c in members], policy, threshold)
            labels.append(any(c.label for c in members))
            scores.append(score)
        out[level] = evaluate(labels, scores, threshold, level)
    return out


@dataclass
class CrossValidation:
    folds: list
    fold_reports: list
    mean_matrix: ConfusionMatrix
    mean_matrix_report: EvalReport
    mean_fold_metrics: dict


def cross_validate(records, k: int = 5, model_cfg=None, train_cfg=None, pipeline_cfg=None, seed: int = 0,
                   fit: Optional[Callable] = None) -> CrossValidation:
    """k-fold cross-validation over individuals.

    Each fold trains on the remaining folds (holding out 10% of their
    individuals for checkpoint selection) and is scored at chunk level.
    Confusion matrices are averaged elementwise; metrics are reported both
    from the mean matrix and as the mean of per-fold metrics.

    ``fit(train_records, val_records, test_records) -> (labels, scores)``
    replaces the default pipeline trainer when given.
    """
    from .dataset import kfold_individuals, split_by_individual

    folds = kfold_individuals(records, k, seed)
    if fit is None:
        from .pipeline import PipelineConfig, fit_and_score

        cfg = pipeline_cfg or PipelineConfig()
        if model_cfg is not None:
            cfg = cfg.replace(model=model_cfg)
        if train_cfg is not None:
            cfg = cfg.replace(train=train_cfg)

        def fit(tr, va, te):
            return fit_and_score(tr, va, te, cfg)

    reports = []
    for i, test_ids in enumerate(folds):
        test = [r for r in records if r.individual_id in test_ids]
        rest = [r for r in records if r.individual_id not in test_ids]
        inner = split_by_individual(rest, (0.9, 0.1, 0.0), seed=seed + i)
        labels, scores = fit(inner.select(rest, "train"), inner.select(rest, "val"), test)
        reports.append(evaluate(labels, scores, level="chunk"))

    mats = [r.matrix for r in reports]
    mean = ConfusionMatrix(*(float(np.mean([getattr(m, a) for m in mats])) for a in ("tp", "fp", "tn", "fn")))
    per_fold = {}
    for name in ("accuracy", "sensitivity", "specificity", "precision", "f1", "auc"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        per_fold[name] = float(np.mean(vals)) if vals else None
    return CrossValidation(folds, reports, mean, report_from_matrix(mean), per_fold)
