"""Pixel-level and lane-level scores on synthetic masks."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError


def f1_score(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _rate(num, den):
    return num / den if den else 0.0


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def precision(self):
        return _rate(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _rate(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)


@dataclass
class Metrics:
    pixel_precision: float
    pixel_recall: float
    pixel_f1: float
    lane_f1: float
    exist_acc: float
    pixel_tp: int
    pixel_fp: int
    pixel_fn: int
    lane_tp: int
    lane_fp: int
    lane_fn: int

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def iou(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def predicted_mask(seg_probs, exist_p, threshold=0.5):
    """Per-pixel argmax, with lanes predicted absent folded into background."""
    mask = np.argmax(seg_probs, axis=0).astype(np.uint8)
    absent = np.flatnonzero(~(np.asarray(exist_p) > threshold)) + 1
    mask[np.isin(mask, absent)] = 0
    return mask


def lane_counts(seg_probs, exist_p, true_mask, true_exist, iou_thresh=0.5):
    """Index-matched lane detection counts.

    Lane ``c`` is predicted present iff ``exist_p[c] > 0.5``; its pixels are
    those where channel ``c`` wins the argmax. A present prediction is a TP
    when its IoU with the same-index true lane reaches ``iou_thresh``.
    """
    if seg_probs.shape[1:] != true_mask.shape:
        raise ShapeError(f"lane_f1: prediction {seg_probs.shape[1:]} vs truth {true_mask.shape}")
    arg = np.argmax(seg_probs, axis=0)
    c = Counts()
    for lane in range(len(exist_p)):
        truth = bool(true_exist[lane])
        if exist_p[lane] > 0.5:
            hit = truth and iou(arg == lane + 1, true_mask == lane + 1) >= iou_thresh
            if hit:
                c.tp += 1
            else:
                c.fp += 1
                c.fn += truth
        elif truth:
            c.fn += 1
    return c


def lane_f1(output, truth, iou_thresh=0.5):
    """Counts for one (ModelOutput, Sample) pair."""
    return lane_counts(output.seg_probs, output.exist_p, truth.mask, truth.exist, iou_thresh)


def pixel_metrics(pred_mask, true_mask):
    """Lane-vs-background confusion counts."""
    if pred_mask.shape != true_mask.shape:
        raise ShapeError(f"pixel_metrics: {pred_mask.shape} vs {true_mask.shape}")
    p, t = pred_mask > 0, true_mask > 0
    return Counts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)))


def exist_accuracy(exist_p, truth):
    """Fraction of correct presence bits; arrays may be [K] or [n,K]."""
    pred = np.asarray(exist_p) > 0.5
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"exist_accuracy: {pred.shape} vs {truth.shape}")
    return float(np.mean(pred == truth))


class MetricAccumulator:
    """Running counts over samples; order of ``add`` calls does not matter."""

    def __init__(self):
        self.pixel = Counts()
        self.lane = Counts()
        self.exist_ok = 0
        self.exist_n = 0

    def add(self, seg_probs, exist_p, true_mask, true_exist):
        self.pixel += pixel_metrics(predicted_mask(seg_probs, exist_p), true_mask)
        self.lane += lane_counts(seg_probs, exist_p, true_mask, true_exist)
        self.exist_ok += int(np.sum((np.asarray(exist_p) > 0.5) == np.asarray(true_exist).astype(bool)))
        self.exist_n += len(exist_p)

    def result(self) -> Metrics:
        px, ln = self.pixel, self.lane
        return Metrics(px.precision, px.recall, px.f1, ln.f1, _rate(self.exist_ok, self.exist_n),
                       px.tp, px.fp, px.fn, ln.tp, ln.fp, ln.fn)
