"""Prediction-to-truth matching and precision/recall/AUC metrics.

Matching is greedy by existence score: each prediction, highest score first,
claims the nearest unmatched truth within the matching radius.  Unclaimed
predictions are false positives (including extra predictions near an already
matched truth); unclaimed truths are false negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["PrCurve", "match", "pr_curve", "default_thresholds"]


@dataclass
class PrCurve:
    points: list[tuple[float, float, float]]  # (threshold, precision, recall)
    auc: float
    tp: int
    fp: int
    fn: int
    default_threshold: float
    truth_empty: bool = False


def match(predictions, truth, radius: float):
    """Greedy one-to-one matching within ``radius`` meters.

    ``predictions`` is a sequence of ((x, y), existence); ``truth`` a
    sequence of (x, y).  Returns (tp, fp, fn, pairing) where pairing lists
    (prediction_index, truth_index) for the matched pairs.  Deterministic:
    predictions are processed by existence descending (ties by position),
    candidate truths by distance (ties by position).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    preds = [((float(p[0]), float(p[1])), float(s)) for p, s in predictions]
    order = sorted(range(len(preds)),
                   key=lambda k: (-preds[k][1], preds[k][0]))
    truth_pts = [(float(t[0]), float(t[1])) for t in truth]
    taken = [False] * len(truth_pts)
    pairing: list[tuple[int, int]] = []
    for k in order:
        (px, py), _ = preds[k]
        best = None
        for t, (tx, ty) in enumerate(truth_pts):
            if taken[t]:
                continue
            d = math.hypot(px - tx, py - ty)
            if d > radius:
                continue
            cand = (d, tx, ty, t)
            if best is None or cand < best:
                best = cand
        if best is not None:
            taken[best[3]] = True
            pairing.append((k, best[3]))
    tp = len(pairing)
    fp = len(preds) - tp
    fn = len(truth_pts) - tp
    return tp, fp, fn, pairing


def default_thresholds(predictions) -> list[float]:
    """Unique existence scores, strictly descending (score-adaptive sweep)."""
    return sorted({float(s) for _, s in predictions}, reverse=True)


def pr_curve(predictions, truth, radius: float, thresholds,
             default_threshold: float = 0.5) -> PrCurve:
    """Precision-recall sweep and its right-step AUC.

    ``thresholds`` must be strictly descending.  Precision with zero kept
    predictions is defined as 1.  With empty truth, recall is undefined and
    reported as 0 with ``truth_empty`` set.
    """
    thresholds = [float(t) for t in thresholds]
    if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly descending")
    truth = list(truth)
    truth_empty = len(truth) == 0

    points = []
    auc = 0.0
    prev_recall = 0.0
    for th in thresholds:
        kept = [(p, s) for p, s in predictions if s >= th]
        tp, fp, fn, _ = match(kept, truth, radius)
        precision = tp / (tp + fp) if (tp + fp) else 1.0
        recall = 0.0 if truth_empty else tp / (tp + fn)
        points.append((th, precision, recall))
        auc += (recall - prev_recall) * precision
        prev_recall = recall

    kept = [(p, s) for p, s in predictions if s >= default_threshold]
    tp, fp, fn, _ = match(kept, truth, radius)
    return PrCurve(points=points, auc=auc, tp=tp, fp=fp, fn=fn,
                   default_threshold=default_threshold,
                   truth_empty=truth_empty)
