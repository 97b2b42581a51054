"""Pixel, relaxed and object-wise segmentation metrics on binary masks.

Any 0/0 ratio is 1 when both masks are empty and 0 otherwise.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import DimensionError


@dataclass
class MetricConfig:
    rho: int = 3
    object_iou_threshold: float = 0.5
    connectivity: int = 8

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if not 0.0 < self.object_iou_threshold <= 1.0:
            raise ValueError("object_iou_threshold must lie in (0, 1]")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(*(a + b for a, b in zip(self, other)))


class PixelMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    iou: float
    accuracy: float


class ObjectScore(NamedTuple):
    f1: float
    tp: int
    fp: int
    fn: int

    def merge(self, other):
        """Aggregate counts with another score and recompute F1."""
        return object_score(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _pair(pred, gt):
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def confusion_counts(pred, gt):
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def metrics_from_counts(c):
    empty = c.tp + c.fp + c.fn == 0
    precision = _ratio(c.tp, c.tp + c.fp, empty)
    recall = _ratio(c.tp, c.tp + c.fn, empty)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, empty)
    total = c.tp + c.fp + c.fn + c.tn
    accuracy = (c.tp + c.tn) / total if total else 1.0
    return PixelMetrics(precision, recall, f1, iou, accuracy)


def pixel_metrics(pred, gt):
    return metrics_from_counts(confusion_counts(pred, gt))


def _distance_to(mask):
    """Euclidean distance of every pixel to the nearest foreground pixel of ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def relaxed_pr(pred, gt, rho=3):
    """Relaxed precision, recall and F1 with a Euclidean tolerance radius ``rho``."""
    p, g = _pair(pred, gt)
    both_empty = not p.any() and not g.any()
    near_gt = _distance_to(g) <= rho
    near_pred = _distance_to(p) <= rho
    n_p, n_g = int(p.sum()), int(g.sum())
    precision = _ratio(int(np.count_nonzero(p & near_gt)), n_p, both_empty)
    recall = _ratio(int(np.count_nonzero(g & near_pred)), n_g, both_empty)
    return precision, recall, _f1(precision, recall)


def connected_components(mask, connectivity=8):
    """Label foreground regions; ids 1..n follow raster order of each region's first pixel.

    Returns ``(labels, n)``.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(mask) > 0
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(m, structure=structure)
    if n:
        # force raster-scan ordering of ids regardless of the labeller's internals
        flat = labels.ravel()
        _, first = np.unique(flat, return_index=True)
        order = np.argsort(first[1:]) if flat[first[0]] == 0 else np.argsort(first)
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, n + 1)
        labels = remap[labels]
    return labels, n


def component_iou(pred_labels, n_pred, gt_labels, n_gt):
    """(n_pred, n_gt) IoU matrix between labelled components."""
    if n_pred == 0 or n_gt == 0:
        return np.zeros((n_pred, n_gt))
    joint = np.bincount(
        pred_labels.ravel().astype(np.int64) * (n_gt + 1) + gt_labels.ravel(), minlength=(n_pred + 1) * (n_gt + 1)
    ).reshape(n_pred + 1, n_gt + 1)
    inter = joint[1:, 1:]
    area_p = joint[1:, :].sum(axis=1)
    area_g = joint[:, 1:].sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    return inter / union


def greedy_match(iou, threshold=0.5):
    """Match pairs with IoU >= threshold greedily by descending IoU; returns list of (pred, gt)."""
    cand = np.argwhere(iou >= threshold)
    if cand.size == 0:
        return []
    vals = iou[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -vals))
    used_p, used_g, pairs = set(), set(), []
    for i in order:
        a, b = int(cand[i, 0]), int(cand[i, 1])
        if a in used_p or b in used_g:
            continue
        used_p.add(a)
        used_g.add(b)
        pairs.append((a, b))
    return pairs


def object_score(tp, fp, fn):
    if tp + fp + fn == 0:
        return ObjectScore(1.0, 0, 0, 0)
    return ObjectScore(2 * tp / (2 * tp + fp + fn), tp, fp, fn)


def object_f1(pred, gt, config=None):
    """Object-wise F1: a predicted component is a hit if it matches an unused gt at IoU >= threshold."""
    config = config or MetricConfig()
    p, g = _pair(pred, gt)
    pl, n_p = connected_components(p, config.connectivity)
    gl, n_g = connected_components(g, config.connectivity)
    pairs = greedy_match(component_iou(pl, n_p, gl, n_g), config.object_iou_threshold)
    tp = len(pairs)
    return object_score(tp, n_p - tp, n_g - tp)


def aggregate_object_f1(scores):
    """Combine per-image scores by summing counts."""
    tp = sum(s.tp for s in scores)
    fp = sum(s.fp for s in scores)
    fn = sum(s.fn for s in scores)
    return object_score(tp, fp, fn)


def evaluate(pred, gt, config=None):
    """All metrics for one mask pair as a flat dict."""
    config = config or MetricConfig()
    pm = pixel_metrics(pred, gt)
    rp, rr, rf = relaxed_pr(pred, gt, config.rho)
    ob = object_f1(pred, gt, config)
    out = dict(pm._asdict())
    out.update(
        relaxed_precision=rp,
        relaxed_recall=rr,
        relaxed_f1=rf,
        object_f1=ob.f1,
        object_tp=ob.tp,
        object_fp=ob.fp,
        object_fn=ob.fn,
    )
    return out
