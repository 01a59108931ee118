"""Fraud-scoring metrics: AUC, KS, precision/recall/F1 and top-fraction precision.

Every function takes parallel ``scores`` and 0/1 ``labels`` sequences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class SingleClass(ValueError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if len(s) == 0:
        raise ValueError("empty scored set")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def _both_classes(y):
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClass("need at least one positive and one negative")
    return n_pos, len(y) - n_pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half (midranks)."""
    s, y = _prep(scores, labels)
    n_pos, n_neg = _both_classes(y)
    ranks = rankdata(s, method="average")
    # twice the U statistic is an exact integer, so the ratio is exact
    u2 = 2.0 * ranks[y == 1].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def ks(scores, labels) -> float:
    """``max_t |TPR(t) - FPR(t)|`` with positive prediction ``score >= t``."""
    s, y = _prep(scores, labels)
    n_pos, n_neg = _both_classes(y)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # thresholds only fall between distinct scores
    last = np.ones(len(s), dtype=bool)
    last[:-1] = s[1:] != s[:-1]
    # |tp/P - fp/N| = |tp*N - fp*P| / (P*N); integer numerator, one rounding
    gap = np.abs(tp[last] * n_neg - fp[last] * n_pos).max()
    return float(gap / (n_pos * n_neg))


@dataclass
class PRF1:
    precision: float
    recall: float
    f1: float
    no_positive_predictions: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def prf1(scores, labels, threshold: float = 0.5) -> PRF1:
    """Precision, recall, F1 for ``score >= threshold``.

    With no positive predictions precision is reported as 0 and the
    ``no_positive_predictions`` flag is set.
    """
    s, y = _prep(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    flag = tp + fp == 0
    precision = 0.0 if flag else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF1(precision, recall, f1, flag)


def topk_precision(scores, labels, fraction: float) -> float:
    """Positive rate among the ``ceil(fraction * n)`` highest scores.

    Ties keep input order (stable descending sort).
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction={fraction} must lie in (0, 1]")
    s, y = _prep(scores, labels)
    k = math.ceil(fraction * len(s) - 1e-12)
    k = min(max(k, 1), len(s))
    order = np.argsort(-s, kind="stable")[:k]
    return float(y[order].mean())


@dataclass
class EvalReport:
    auc: float
    ks: float
    f1: float
    precision: float
    recall: float
    topk: float
    n: int
    positives: int
    threshold: float = 0.5
    fraction: float = 0.01

    def to_text(self) -> str:
        fields = [("auc", self.auc), ("ks", self.ks), ("f1", self.f1), ("precision", self.precision),
                  ("recall", self.recall), ("topk", self.topk), ("n", self.n), ("positives", self.positives)]
        return "\n".join(f"{k}={_fmt(v)}" for k, v in fields) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                vals[k.strip()] = v.strip()
        ints = {"n", "positives"}
        return cls(**{k: (int(v) if k in ints else float(v)) for k, v in vals.items()})


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def evaluate(scores, labels, threshold: float = 0.5, fraction: float = 0.01) -> EvalReport:
    s, y = _prep(scores, labels)
    try:
        a, k = auc(s, y), ks(s, y)
    except SingleClass:
        a = k = float("nan")
    p = prf1(s, y, threshold)
    return EvalReport(a, k, p.f1, p.precision, p.recall, topk_precision(s, y, fraction),
                      len(s), int(y.sum()), threshold, fraction)
