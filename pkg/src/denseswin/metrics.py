"""Confusion matrices, rate metrics, confidence intervals, ROC/PR curves and PCA.

Counts stay integers until the final division, so rates computed here agree
exactly with any other integer-counting implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError

Z_95 = 1.96


@dataclass
class ConfusionMatrix:
    """``counts[target][predicted]``."""

    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.ndim != 2 or self.counts.shape != (k, k):
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ContractError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(k))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class ``c``."""
        tp = int(self.counts[c, c])
        fn = int(self.counts[c].sum()) - tp
        fp = int(self.counts[:, c].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion(preds, labels, k: int, class_names: Sequence[str] = ()) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionError(f"preds {preds.shape} and labels {labels.shape} must be equal 1-d arrays")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} values must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def _ratio(num: int, den: int) -> tuple[float, bool]:
    """``num / den``, or ``(0.0, True)`` when the denominator is zero."""
    return (num / den, False) if den else (0.0, True)


def f1_score(precision: float, sensitivity: float) -> float:
    s = precision + sensitivity
    return 2.0 * precision * sensitivity / s if s else 0.0


def sensitivity_ci(sen: float, n: int, z: float = Z_95) -> tuple[float, float]:
    """Normal-approximation interval ``sen +- z sqrt(sen (1 - sen) / n)`` clamped to [0, 1]."""
    if not 0 <= sen <= 1:
        raise ContractError(f"sensitivity must be in [0, 1], got {sen}")
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    half = z * math.sqrt(sen * (1.0 - sen) / n)
    return max(0.0, sen - half), min(1.0, sen + half)


@dataclass
class MetricsReport:
    accuracy: float
    class_names: tuple[str, ...]
    per_class_accuracy: list[float]
    sensitivity: list[float]
    precision: list[float]
    f1: list[float]
    macro_sensitivity: float
    macro_precision: float
    macro_f1: float
    micro_sensitivity: float
    micro_precision: float
    micro_f1: float
    sensitivity_ci: tuple[float, float]
    zero_division: list[str] = field(default_factory=list)
    roc_auc: float | None = None
    pr_auc: float | None = None
    skipped_classes: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        """Long-format ``(metric, class, value)`` rows."""
        out = [("accuracy", "all", self.accuracy)]
        for i, name in enumerate(self.class_names):
            out += [
                ("accuracy", name, self.per_class_accuracy[i]),
                ("sensitivity", name, self.sensitivity[i]),
                ("precision", name, self.precision[i]),
                ("f1", name, self.f1[i]),
            ]
        out += [
            ("sensitivity", "macro", self.macro_sensitivity),
            ("precision", "macro", self.macro_precision),
            ("f1", "macro", self.macro_f1),
            ("sensitivity", "micro", self.micro_sensitivity),
            ("precision", "micro", self.micro_precision),
            ("f1", "micro", self.micro_f1),
            ("sensitivity_ci_low", "macro", self.sensitivity_ci[0]),
            ("sensitivity_ci_high", "macro", self.sensitivity_ci[1]),
        ]
        if self.roc_auc is not None:
            out.append(("roc_auc", "macro", self.roc_auc))
        if self.pr_auc is not None:
            out.append(("pr_auc", "macro", self.pr_auc))
        return out

    def summary(self) -> str:
        return (
            f"Acc {100 * self.accuracy:.2f}  Sen {100 * self.macro_sensitivity:.2f}  "
            f"Pre {100 * self.macro_precision:.2f}  F1 {100 * self.macro_f1:.2f}"
        )


def metrics_from_cm(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest rates plus macro and micro averages.

    A zero denominator yields 0 for that rate and is listed in ``zero_division``.
    """
    total = cm.total
    if total == 0:
        raise ContractError("confusion matrix is empty")
    acc, sen, pre, f1 = [], [], [], []
    flags = []
    sum_tp = sum_fp = sum_fn = 0
    for c in range(cm.k):
        tp, fp, fn, tn = cm.one_vs_rest(c)
        sum_tp, sum_fp, sum_fn = sum_tp + tp, sum_fp + fp, sum_fn + fn
        acc.append((tp + tn) / total)
        s, bad_s = _ratio(tp, tp + fn)
        p, bad_p = _ratio(tp, tp + fp)
        if bad_s:
            flags.append(f"sensitivity:{cm.class_names[c]}")
        if bad_p:
            flags.append(f"precision:{cm.class_names[c]}")
        sen.append(s)
        pre.append(p)
        f1.append(f1_score(p, s))
    macro_sen = float(np.mean(sen))
    micro_sen, _ = _ratio(sum_tp, sum_tp + sum_fn)
    micro_pre, _ = _ratio(sum_tp, sum_tp + sum_fp)
    return MetricsReport(
        accuracy=int(np.trace(cm.counts)) / total,
        class_names=cm.class_names,
        per_class_accuracy=acc,
        sensitivity=sen,
        precision=pre,
        f1=f1,
        macro_sensitivity=macro_sen,
        macro_precision=float(np.mean(pre)),
        macro_f1=float(np.mean(f1)),
        micro_sensitivity=micro_sen,
        micro_precision=micro_pre,
        micro_f1=f1_score(micro_pre, micro_sen),
        sensitivity_ci=sensitivity_ci(min(max(macro_sen, 0.0), 1.0), total),
        zero_division=flags,
    )


# ---------------------------------------------------------------------------
# ROC / PR
# ---------------------------------------------------------------------------


@dataclass
class Curve:
    kind: str  # "roc" -> (FPR, TPR); "pr" -> (recall, precision)
    x: np.ndarray
    y: np.ndarray
    auc: float


def _sweep(scores: np.ndarray, positive: np.ndarray):
    """Cumulative (tp, fp) counts at every distinct threshold, high to low."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order].astype(np.int64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1 - pos)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # end of each tie group
    return tp[last], fp[last]


def binary_curves(scores, positive) -> tuple[Curve, Curve]:
    """ROC and PR curves of one score column against a boolean target.

    ROC-AUC uses the trapezoid rule with integer counts, which makes it
    identical to the Mann-Whitney statistic (ties count one half). PR-AUC
    is the step sum ``sum (R_i - R_{i-1}) P_i``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs at least one positive and one negative")
    tp, fp = _sweep(scores, positive)
    tp0 = np.r_[0, tp]
    fp0 = np.r_[0, fp]
    twice_area = int(np.sum((fp0[1:] - fp0[:-1]) * (tp0[1:] + tp0[:-1])))
    roc = Curve("roc", fp0 / n_neg, tp0 / n_pos, twice_area / (2 * n_pos * n_neg))
    precision = tp / (tp + fp)
    recall = tp / n_pos
    pr_auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    pr = Curve("pr", np.r_[0.0, recall], np.r_[1.0, precision], pr_auc)
    return roc, pr


def mann_whitney_auc(scores, positive) -> float:
    """Pair-counting AUC, used as an independent check of :func:`binary_curves`."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    p, n = scores[positive], scores[~positive]
    diff = p[:, None] - n[None, :]
    twice = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return twice / (2 * len(p) * len(n))


@dataclass
class CurveSet:
    roc: dict[int, Curve]
    pr: dict[int, Curve]
    roc_auc: float
    pr_auc: float
    skipped: list[int]


def roc_pr_curves(scores, labels, k: int | None = None) -> CurveSet:
    """One-vs-rest curves for ``scores[N, K]`` (rows sum to 1), macro-averaged AUCs.

    Classes without positives (or without negatives) are skipped and listed.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DimensionError(f"scores {scores.shape} do not match labels {labels.shape}")
    k = scores.shape[1] if k is None else k
    if np.any(np.abs(scores.sum(axis=1) - 1.0) > 1e-4):
        raise ContractError("score rows must sum to 1 within 1e-4")
    roc, pr, skipped = {}, {}, []
    for c in range(k):
        positive = labels == c
        if positive.all() or not positive.any():
            skipped.append(c)
            continue
        roc[c], pr[c] = binary_curves(scores[:, c], positive)
    if not roc:
        raise ContractError("no class has both positives and negatives")
    return CurveSet(
        roc,
        pr,
        float(np.mean([c.auc for c in roc.values()])),
        float(np.mean([c.auc for c in pr.values()])),
        skipped,
    )


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PCAProjection:
    mean: np.ndarray
    axes: np.ndarray  # [2, D], orthonormal rows
    coords: np.ndarray  # [N, 2]
    variances: tuple[float, float]
    explained: tuple[float, float]
    degenerate: bool = False
    labels: np.ndarray | None = None


def _orient(v: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component positive."""
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def _top_eigvec(c: np.ndarray, against: np.ndarray | None, seed: int, iters: int, tol: float):
    d = c.shape[0]
    v = np.random.default_rng(seed).standard_normal(d)
    if against is not None:
        v -= (v @ against) * against
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = c @ v
        if against is not None:
            w -= (w @ against) * against
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w /= norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            break
        v = w
    return v, float(v @ c @ v)


def pca_2d(features, labels=None, *, iters: int = 20000, tol: float = 1e-13) -> PCAProjection:
    """Top-two principal axes by power iteration with deflation.

    The second axis is re-orthogonalised against the first on every
    iteration. Zero-variance input sets ``degenerate`` and returns the first
    two coordinate axes.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DimensionError(f"pca_2d needs [N>=2, D>=2] features, got {x.shape}")
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    total = float(np.trace(cov))
    if total <= 1e-300:
        axes = np.eye(2, d)
        return PCAProjection(mean, axes, xc @ axes.T, (0.0, 0.0), (0.0, 0.0), True, labels)
    v1, l1 = _top_eigvec(cov, None, 0, iters, tol)
    v1 = _orient(v1)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, _ = _top_eigvec(deflated, v1, 1, iters, tol)
    v2 -= (v2 @ v1) * v1
    v2 = _orient(v2 / np.linalg.norm(v2))
    l2 = float(v2 @ cov @ v2)
    axes = np.stack([v1, v2])
    coords = xc @ axes.T
    return PCAProjection(mean, axes, coords, (l1, l2), (l1 / total, l2 / total), False, labels)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
