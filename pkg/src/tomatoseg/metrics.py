"""Segmentation evaluation: IoU/Dice, mask-derived detection mAP, and AUC.

IoU and Dice aggregate global pixel counts across the whole evaluation set.
Detection boxes are minimum bounding rectangles of 4-connected components
of each class mask, scored by the mean per-pixel confidence over the
component; average precision interpolates the full precision-recall curve
(an 11-point variant is available). AUC is the one-vs-rest pixel ROC AUC
via the rank statistic, ties counted 0.5.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class MaskPair:
    """Predicted and ground-truth class-index grids for one image."""

    pred: np.ndarray
    truth: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.pred = np.asarray(self.pred)
        self.truth = np.asarray(self.truth)
        if self.pred.shape != self.truth.shape:
            raise ShapeError(f"mask dims disagree: {self.pred.shape} vs {self.truth.shape}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != self.pred.shape:
                raise ShapeError("confidence grid dims must match the masks")


@dataclass(frozen=True)
class DetectionBox:
    """Inclusive bounding rectangle of one segmented object."""

    cls: int
    row_min: int
    col_min: int
    row_max: int
    col_max: int
    score: float

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ShapeError("degenerate box: min exceeds max")


@dataclass
class MetricsReport:
    class_names: dict
    confusion: np.ndarray
    iou: dict
    dice: dict
    miou: float
    mdc: float
    ap: dict = field(default_factory=dict)
    map: float = float("nan")
    auc_per_class: dict = field(default_factory=dict)
    auc: float = float("nan")
    absent_classes: list = field(default_factory=list)


def confusion_matrix(pairs, classes: int) -> np.ndarray:
    """(classes, classes) counts, rows = truth, cols = prediction."""
    conf = np.zeros((classes, classes), dtype=np.int64)
    for pair in pairs:
        t = pair.truth.ravel().astype(np.int64)
        p = pair.pred.ravel().astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= classes or p.min() < 0 or p.max() >= classes):
            raise ShapeError(f"mask values outside the {classes}-class range")
        conf += np.bincount(t * classes + p, minlength=classes * classes).reshape(
            classes, classes
        )
    return conf


def iou_from_confusion(conf: np.ndarray, c: int) -> float | None:
    inter = int(conf[c, c])
    union = int(conf[c, :].sum() + conf[:, c].sum() - conf[c, c])
    if union == 0:
        return None
    return inter / union


def dice_from_confusion(conf: np.ndarray, c: int) -> float | None:
    inter = int(conf[c, c])
    total = int(conf[c, :].sum() + conf[:, c].sum())
    if total == 0:
        return None
    return 2.0 * inter / total


def classwise_iou(pairs, c: int, classes: int) -> float | None:
    return iou_from_confusion(confusion_matrix(pairs, classes), c)


def dice_coeff(pairs, c: int, classes: int) -> float | None:
    return dice_from_confusion(confusion_matrix(pairs, classes), c)


def connected_components(mask: np.ndarray) -> list:
    """4-connected components of a binary grid.

    Components are ordered by their first pixel in row-major scan; each is
    an (n, 2) int array of (row, col) pixels, also in row-major order.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r0 in range(h):
        row = mask[r0]
        for c0 in range(w):
            if not row[c0] or seen[r0, c0]:
                continue
            pixels = []
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for rr, cc in ((r - 1, c), (r, c - 1), (r, c + 1), (r + 1, c)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            pixels.sort()
            comps.append(np.asarray(pixels, dtype=np.int64))
    return comps


def mask_to_boxes(mask: np.ndarray, confidence: np.ndarray | None, classes: int) -> list:
    """Minimum bounding rectangles of every class component.

    Ground-truth masks pass confidence=None and get score 1.0; predictions
    score each box with the mean confidence over the component's pixels.
    """
    boxes = []
    for c in range(1, classes):
        for comp in connected_components(mask == c):
            rows, cols = comp[:, 0], comp[:, 1]
            if confidence is None:
                score = 1.0
            else:
                score = float(confidence[rows, cols].mean())
            boxes.append(
                DetectionBox(
                    cls=c,
                    row_min=int(rows.min()),
                    col_min=int(cols.min()),
                    row_max=int(rows.max()),
                    col_max=int(cols.max()),
                    score=score,
                )
            )
    return boxes


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    rh = min(a.row_max, b.row_max) - max(a.row_min, b.row_min) + 1
    cw = min(a.col_max, b.col_max) - max(a.col_min, b.col_min) + 1
    if rh <= 0 or cw <= 0:
        return 0.0
    inter = rh * cw
    area_a = (a.row_max - a.row_min + 1) * (a.col_max - a.col_min + 1)
    area_b = (b.row_max - b.row_min + 1) * (b.col_max - b.col_min + 1)
    return inter / (area_a + area_b - inter)


def average_precision(pred_boxes, truth_boxes, iou_thresh: float = 0.5, interp: str = "all"):
    """AP for one class. Boxes are (image_id, DetectionBox) pairs.

    Predictions greedily match the best unmatched same-image truth at
    IoU >= iou_thresh, in descending score order. Returns None when there
    are no truth boxes (class absent).
    """
    if interp not in ("all", "eleven"):
        raise ConfigError(f"unknown AP interpolation '{interp}'")
    truth_boxes = list(truth_boxes)
    if not truth_boxes:
        return None
    if not pred_boxes:
        return 0.0
    order = sorted(range(len(pred_boxes)), key=lambda i: -pred_boxes[i][1].score)
    matched = [False] * len(truth_boxes)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box = pred_boxes[i]
        best_iou, best_j = 0.0, -1
        for j, (timg, tbox) in enumerate(truth_boxes):
            if timg != img or matched[j]:
                continue
            iou = box_iou(box, tbox)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / len(truth_boxes)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    if interp == "eleven":
        pts = []
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            pts.append(precision[mask].max() if mask.any() else 0.0)
        return float(np.mean(pts))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def map_from_masks(pairs, classes: int, iou_thresh: float = 0.5, interp: str = "all"):
    """(mAP, per-class AP dict) over foreground classes present in ground truth."""
    preds_by_cls = {c: [] for c in range(1, classes)}
    truths_by_cls = {c: [] for c in range(1, classes)}
    for img_id, pair in enumerate(pairs):
        for box in mask_to_boxes(pair.truth, None, classes):
            truths_by_cls[box.cls].append((img_id, box))
        for box in mask_to_boxes(pair.pred, pair.confidence, classes):
            preds_by_cls[box.cls].append((img_id, box))
    per_class = {}
    for c in range(1, classes):
        per_class[c] = average_precision(
            preds_by_cls[c], truths_by_cls[c], iou_thresh, interp
        )
    present = [v for v in per_class.values() if v is not None]
    mean_ap = float(np.mean(present)) if present else float("nan")
    return mean_ap, per_class


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney AUC with average ranks; ties contribute 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_ranks = ranks[labels].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_ovr(prob_maps, truths, classes: int):
    """(mean AUC, per-class dict) one-vs-rest over pixels, pooled across images."""
    per_class = {}
    for c in range(1, classes):
        scores = np.concatenate([p[..., c].ravel() for p in prob_maps])
        labels = np.concatenate([(t == c).ravel() for t in truths])
        per_class[c] = auc_binary(scores, labels)
    present = [v for v in per_class.values() if v is not None]
    return (float(np.mean(present)) if present else float("nan")), per_class


def evaluate_masks(
    pairs,
    class_names: dict,
    iou_thresh: float = 0.5,
    interp: str = "all",
    prob_maps=None,
) -> MetricsReport:
    """Assemble the full report from mask pairs (and prob maps for AUC)."""
    classes = len(class_names)
    conf = confusion_matrix(pairs, classes)
    iou, dice, absent = {}, {}, []
    for c in range(1, classes):
        iou[c] = iou_from_confusion(conf, c)
        dice[c] = dice_from_confusion(conf, c)
        if iou[c] is None:
            absent.append(c)
    evaluated = [c for c in range(1, classes) if iou[c] is not None]
    miou = float(np.mean([iou[c] for c in evaluated])) if evaluated else float("nan")
    mdc = float(np.mean([dice[c] for c in evaluated])) if evaluated else float("nan")
    mean_ap, ap = map_from_masks(pairs, classes, iou_thresh, interp)
    report = MetricsReport(
        class_names=dict(class_names),
        confusion=conf,
        iou=iou,
        dice=dice,
        miou=miou,
        mdc=mdc,
        ap=ap,
        map=mean_ap,
        absent_classes=absent,
    )
    if prob_maps is not None:
        report.auc, report.auc_per_class = auc_ovr(prob_maps, [p.truth for p in pairs], classes)
    return report
