"""Open-set scoring, threshold calibration and evaluation metrics.

Scores are maximum logits. ``C`` (the number of known classes) is used as the
label of the unknown class in predictions.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScoredSample:
    logits: np.ndarray
    label: int
    known: bool

    @property
    def score(self) -> float:
        return score(self.logits)

    def predicted(self, theta: float) -> int:
        return predict(self.logits, theta)


def score(logits) -> float:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("score of empty logits")
    return float(logits.max())


def scores(logits: np.ndarray) -> np.ndarray:
    """Row-wise :func:`score` for an ``(N, C)`` array."""
    return np.asarray(logits).max(axis=1)


def calibrate_threshold(val_scores, target: float = 0.9) -> float:
    """Largest observed score ``v`` with at least ``target`` of scores ``>= v``."""
    s = np.sort(np.asarray(val_scores, dtype=np.float64))[::-1]
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0 < target <= 1:
        raise ValueError(f"target must lie in (0, 1], got {target}")
    need = min(s.size, math.ceil(target * s.size - 1e-9))
    return float(s[need - 1])


def predict(logits, theta: float) -> int:
    logits = np.asarray(logits)
    if logits.max() >= theta:
        return int(np.argmax(logits))
    return logits.shape[-1]


def predict_all(logits: np.ndarray, theta: float) -> np.ndarray:
    logits = np.asarray(logits)
    pred = logits.argmax(axis=1)
    return np.where(logits.max(axis=1) >= theta, pred, logits.shape[1])


def acc(logits: np.ndarray, labels) -> float:
    """Closed-set top-1 accuracy over known samples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.asarray(logits).argmax(axis=1) == labels))


def _midranks(values: np.ndarray) -> np.ndarray:
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def auroc(known_scores, unknown_scores) -> float:
    """Mann-Whitney estimate of P(known score > unknown score), ties count half."""
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise ValueError("AUROC needs at least one known and one unknown sample")
    ranks = _midranks(np.concatenate([k, u]))
    u_stat = ranks[:k.size].sum() - k.size * (k.size + 1) / 2.0
    return float(u_stat / (k.size * u.size))


def roc_curve(known_scores, unknown_scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) with knowns as positives, thresholds at +inf then every distinct score."""
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    thresholds = np.unique(np.concatenate([k, u]))[::-1]
    tpr = np.concatenate([[0.0], (k[None, :] >= thresholds[:, None]).mean(axis=1)])
    fpr = np.concatenate([[0.0], (u[None, :] >= thresholds[:, None]).mean(axis=1)])
    return fpr, tpr


def oscr_curve(known_scores, known_correct, unknown_scores) -> tuple[np.ndarray, np.ndarray]:
    """Step points (fpr, ccr): for each distinct FPR level, the CCR reached just
    before the next unknown sample is admitted, starting from FPR 0."""
    k = np.asarray(known_scores, dtype=np.float64)
    correct = np.asarray(known_correct, dtype=bool)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise ValueError("OSCR needs at least one known and one unknown sample")
    u_levels, u_counts = np.unique(u, return_counts=True)
    u_levels, u_counts = u_levels[::-1], u_counts[::-1]
    ck = np.sort(k[correct])
    # correct knowns strictly above each unknown level (and all of them at the end)
    above = ck.size - np.searchsorted(ck, u_levels, side="right")
    fpr = np.concatenate([[0.0], np.cumsum(u_counts) / u.size])
    ccr = np.concatenate([above / k.size, [ck.size / k.size]])
    return fpr, ccr


def oscr(known_scores, known_correct, unknown_scores) -> float:
    """Left-rectangle area under the CCR-versus-FPR step curve."""
    fpr, ccr = oscr_curve(known_scores, known_correct, unknown_scores)
    return float(np.sum(np.diff(fpr) * ccr[:-1]))


@dataclass
class F1Result:
    macro_f1: float
    per_class: list[tuple[int, float, float, float]]  # (class, precision, recall, f1)
    excluded: list[int] = field(default_factory=list)


def macro_f1_table(pred, labels, n_known: int) -> F1Result:
    """Macro-F1 over the known classes plus the unknown class ``n_known``.

    An empty known class scores 0; the unknown class is left out of the mean
    when it is absent from both predictions and labels.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    rows, excluded, f1s = [], [], []
    for c in range(n_known + 1):
        tp = int(np.sum((pred == c) & (labels == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(labels == c))
        if c == n_known and n_pred == 0 and n_true == 0:
            excluded.append(c)
            continue
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        f1 = 2 * tp / (n_pred + n_true) if (n_pred + n_true) else 0.0
        rows.append((c, precision, recall, f1))
        f1s.append(f1)
    return F1Result(float(np.mean(f1s)) if f1s else 0.0, rows, excluded)


def macro_f1(pred, labels, n_known: int) -> float:
    return macro_f1_table(pred, labels, n_known).macro_f1


@dataclass
class EvalReport:
    acc: float
    auroc: float | None
    oscr: float | None
    macro_f1: float
    threshold: float
    per_class: list = field(default_factory=list)
    roc: tuple[np.ndarray, np.ndarray] | None = None
    oscr_points: tuple[np.ndarray, np.ndarray] | None = None
    notes: list[str] = field(default_factory=list)

    def metrics(self) -> dict[str, float | None]:
        return {"acc": self.acc, "auroc": self.auroc, "oscr": self.oscr,
                "macro_f1": self.macro_f1, "threshold": self.threshold}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for name, value in self.metrics().items():
            buf.write(f"{name},{'' if value is None else repr(float(value))}\n")
        for note in self.notes:
            buf.write(f"note,{note}\n")
        buf.write("\nclass,precision,recall,f1\n")
        for c, p, r, f in self.per_class:
            buf.write(f"{c},{p!r},{r!r},{f!r}\n")
        if self.oscr_points is not None:
            buf.write("\nfpr,ccr\n")
            for a, b in zip(*self.oscr_points):
                buf.write(f"{a!r},{b!r}\n")
        if self.roc is not None:
            buf.write("\nfpr,tpr\n")
            for a, b in zip(*self.roc):
                buf.write(f"{a!r},{b!r}\n")
        return buf.getvalue()


def evaluate_logits(test_logits: np.ndarray, test_labels, test_known, val_logits: np.ndarray,
                    target: float = 0.9) -> EvalReport:
    """All metrics from eval-mode logits.

    ``test_labels`` are classifier indices for knowns (ignored for unknowns);
    ``test_known`` flags known samples.
    """
    test_logits = np.asarray(test_logits, dtype=np.float64)
    known = np.asarray(test_known, dtype=bool)
    labels = np.asarray(test_labels)
    n_known = test_logits.shape[1]
    theta = calibrate_threshold(scores(val_logits), target)
    s = scores(test_logits)
    k_logits = test_logits[known]
    accuracy = acc(k_logits, labels[known])
    notes = []
    if known.all():
        notes.append("no unknown samples: open-set metrics disabled")
        au = os_ = None
        roc = pts = None
    else:
        correct = k_logits.argmax(axis=1) == labels[known]
        au = auroc(s[known], s[~known])
        os_ = oscr(s[known], correct, s[~known])
        roc = roc_curve(s[known], s[~known])
        pts = oscr_curve(s[known], correct, s[~known])
    truth = np.where(known, labels, n_known)
    f1 = macro_f1_table(predict_all(test_logits, theta), truth, n_known)
    if f1.excluded:
        notes.append("unknown class absent from labels and predictions: excluded from macro-F1")
    return EvalReport(accuracy, au, os_, f1.macro_f1, theta, f1.per_class, roc, pts, notes)
