"""Instance extraction from probability maps and the metric suite.

Matching follows the Stardist/Cellpose convention: one-to-one assignment
maximizing total IoU among pairs at or above the threshold (inclusive),
AP(t) = TP/(TP+FP+FN), F1(t) = 2TP/(2TP+FP+FN), mAP averaged over
t in {0.50, 0.55, ..., 0.95}. mIOU and mDice average over matched pairs at
t = 0.5 (unmatched instances affect AP/F1 only), with an optional
``penalize_unmatched`` variant dividing by TP+FP+FN instead.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .data import LabelMap

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
MAP_THRESHOLDS = tuple(0.5 + 0.05 * k for k in range(10))


def extract_instances(prob, threshold=0.5, min_size=10):
    """Binarize, 4-connected label, drop small components, fill holes, relabel."""
    prob = np.asarray(prob)
    binary = prob >= threshold
    labels, count = ndimage.label(binary, structure=FOUR_CONNECTED)
    if count == 0:
        return LabelMap(np.zeros(prob.shape, dtype=np.uint32))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    keep = np.flatnonzero(sizes >= min_size)
    keep = keep[keep > 0]
    out = np.where(np.isin(labels, keep), labels, 0).astype(np.int64)
    slices = ndimage.find_objects(labels)
    for lab_id in keep:
        box = slices[lab_id - 1]
        region = out[box] == lab_id
        filled = ndimage.binary_fill_holes(region)
        out[box][filled & (out[box] == 0)] = lab_id
    return LabelMap(out.astype(np.uint32)).canonicalized()


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # ((pred_id, gt_id, iou), ...)
    tp: int
    fp: int
    fn: int
    threshold: float


@dataclass(frozen=True)
class MetricsReport:
    miou: float
    mdice: float
    ap50: float
    map50_95: float
    f150: float

    def as_dict(self):
        return {"mIOU": self.miou, "mDice": self.mdice, "AP": self.ap50,
                "mAP_0.5:0.95": self.map50_95, "F1_0.5": self.f150}


def _iou_table(pred, gt):
    """Dense IoU matrix over instance IDs present in each map."""
    pl = pred.labels.ravel().astype(np.int64)
    gl = gt.labels.ravel().astype(np.int64)
    pred_ids = np.unique(pl)
    pred_ids = pred_ids[pred_ids > 0]
    gt_ids = np.unique(gl)
    gt_ids = gt_ids[gt_ids > 0]
    if not len(pred_ids) or not len(gt_ids):
        return pred_ids, gt_ids, np.zeros((len(pred_ids), len(gt_ids)))
    pred_pos = {int(v): i for i, v in enumerate(pred_ids)}
    gt_pos = {int(v): i for i, v in enumerate(gt_ids)}
    both = (pl > 0) & (gl > 0)
    codes = pl[both] * (gl.max() + 1) + gl[both]
    uniq, counts = np.unique(codes, return_counts=True)
    pred_area = np.bincount(pl)
    gt_area = np.bincount(gl)
    iou = np.zeros((len(pred_ids), len(gt_ids)))
    for code, inter in zip(uniq, counts):
        p = int(code // (gl.max() + 1))
        g = int(code % (gl.max() + 1))
        union = pred_area[p] + gt_area[g] - inter
        iou[pred_pos[p], gt_pos[g]] = inter / union
    return pred_ids, gt_ids, iou


def _match_from_table(pred_ids, gt_ids, iou, threshold):
    eligible = iou >= threshold
    pairs = []
    if eligible.any():
        scores = np.where(eligible, iou, 0.0)
        rows, cols = linear_sum_assignment(-scores)
        for r, c in zip(rows, cols):
            if eligible[r, c]:
                pairs.append((int(pred_ids[r]), int(gt_ids[c]), float(iou[r, c])))
    tp = len(pairs)
    return MatchResult(
        pairs=tuple(pairs), tp=tp, fp=len(pred_ids) - tp, fn=len(gt_ids) - tp,
        threshold=threshold,
    )


def match_instances(pred, gt, threshold=0.5):
    """Optimal one-to-one IoU matching at the given (inclusive) threshold."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError("label maps must share dimensions")
    pred_ids, gt_ids, iou = _iou_table(pred, gt)
    return _match_from_table(pred_ids, gt_ids, iou, threshold)


def compute_metrics(pred, gt, penalize_unmatched=False):
    """Metric suite over one image pair."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError("label maps must share dimensions")
    pred_ids, gt_ids, iou = _iou_table(pred, gt)
    if not len(pred_ids) and not len(gt_ids):
        warnings.warn("both label maps empty: metrics defined as 1")
        return MetricsReport(1.0, 1.0, 1.0, 1.0, 1.0)

    aps = []
    f1_50 = 0.0
    miou = 0.0
    mdice = 0.0
    for t in MAP_THRESHOLDS:
        match = _match_from_table(pred_ids, gt_ids, iou, t)
        denom = match.tp + match.fp + match.fn
        ap = match.tp / denom if denom else 0.0
        aps.append(ap)
        if t == 0.5:
            f1_50 = 2 * match.tp / (2 * match.tp + match.fp + match.fn) if denom else 0.0
            ious = np.array([p[2] for p in match.pairs])
            if penalize_unmatched:
                miou = float(ious.sum() / denom) if denom else 0.0
                mdice = float((2 * ious / (1 + ious)).sum() / denom) if denom else 0.0
            else:
                miou = float(ious.mean()) if len(ious) else 0.0
                mdice = float((2 * ious / (1 + ious)).mean()) if len(ious) else 0.0
    return MetricsReport(
        miou=miou, mdice=mdice, ap50=aps[0],
        map50_95=float(np.mean(aps)), f150=f1_50,
    )


def aggregate_metrics(reports):
    """Dataset-level mean of per-image reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricsReport(
        miou=float(np.mean([r.miou for r in reports])),
        mdice=float(np.mean([r.mdice for r in reports])),
        ap50=float(np.mean([r.ap50 for r in reports])),
        map50_95=float(np.mean([r.map50_95 for r in reports])),
        f150=float(np.mean([r.f150 for r in reports])),
    )
