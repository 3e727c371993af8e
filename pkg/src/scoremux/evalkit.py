"""Agreement metrics (QWK, accuracy, macro-F1), paired t-test, eval reports.

Everything here is a pure function of label lists; the only I/O is the JSON
eval-report document. The t-distribution tail is evaluated internally via the
regularized incomplete beta (continued fraction), keeping the package free of
statistics dependencies and byte-reproducible.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

_TINY = 1e-300


def _validate_labels(golds: Sequence[int], preds: Sequence[int], num_classes: int) -> None:
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if len(golds) != len(preds):
        raise ContractError(f"length mismatch: {len(golds)} golds vs {len(preds)} preds")
    if len(golds) == 0:
        raise ContractError("empty label lists")
    for v in (*golds, *preds):
        if not (0 <= int(v) < num_classes):
            raise ContractError(f"label {v} outside [0, {num_classes})")


def confusion_matrix(golds: Sequence[int], preds: Sequence[int], num_classes: int) -> np.ndarray:
    _validate_labels(golds, preds, num_classes)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    for g, p in zip(golds, preds):
        m[int(g), int(p)] += 1
    return m


def qwk(golds: Sequence[int], preds: Sequence[int], num_classes: int) -> float:
    """Quadratic weighted kappa: 1 - sum(w*O) / sum(w*E).

    w_ij = (i-j)^2 / (C-1)^2; E is the outer product of the two marginal
    histograms scaled so its entries sum to N. A zero expected-disagreement
    denominator (single identical class on both sides) is defined as 1.0.
    """
    observed = confusion_matrix(golds, preds, num_classes)
    n = len(golds)
    idx = np.arange(num_classes, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    denom = float((w * expected).sum())
    if denom == 0.0:
        warnings.warn("degenerate QWK (single identical class); defining agreement as 1.0", RuntimeWarning)
        return 1.0
    return 1.0 - float((w * observed).sum()) / denom


def accuracy(golds: Sequence[int], preds: Sequence[int]) -> float:
    if len(golds) != len(preds):
        raise ContractError(f"length mismatch: {len(golds)} golds vs {len(preds)} preds")
    if len(golds) == 0:
        raise ContractError("empty label lists")
    return sum(int(g) == int(p) for g, p in zip(golds, preds)) / len(golds)


def macro_f1(golds: Sequence[int], preds: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1; classes absent from both lists are skipped."""
    m = confusion_matrix(golds, preds, num_classes)
    scores = []
    for c in range(num_classes):
        tp = m[c, c]
        support = m[c, :].sum()
        predicted = m[:, c].sum()
        if support == 0 and predicted == 0:
            continue
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores)) if scores else 0.0


# -- paired t-test -------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """(t statistic, two-sided p) for paired samples; sample sd, df = n-1.

    Zero-variance differences degenerate deterministically: all-zero -> (0, 1);
    identical nonzero -> (+/-inf, 0).
    """
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ContractError("paired t-test needs at least 2 pairs")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, student_t_two_sided_p(t, n - 1)


# -- evaluation over a registry ------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    task_id: str
    n_test: int
    qwk: float
    accuracy: float
    macro_f1: float
    confusion: tuple[tuple[int, ...], ...]

    def to_json(self) -> str:
        # fixed key order, one document per report
        doc = {
            "task_id": self.task_id,
            "n_test": self.n_test,
            "qwk": self.qwk,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": [list(row) for row in self.confusion],
        }
        return json.dumps(doc, indent=2)


def evaluate(registry, backbone, task_id: str, test_split) -> EvalReport:
    """Score every test item through the registry and assemble all metrics."""
    from .orchestrator import score  # local import: orchestrator owns scoring

    if not test_split:
        raise ContractError("empty test split")
    golds = []
    preds = []
    num_classes = 0
    for item in test_split:
        result = score(registry, backbone, task_id, item.text)
        golds.append(item.score)
        preds.append(result.label)
        num_classes = len(result.probs)
    m = confusion_matrix(golds, preds, num_classes)
    return EvalReport(
        task_id=task_id,
        n_test=len(golds),
        qwk=qwk(golds, preds, num_classes),
        accuracy=accuracy(golds, preds),
        macro_f1=macro_f1(golds, preds, num_classes),
        confusion=tuple(tuple(int(x) for x in row) for row in m),
    )
