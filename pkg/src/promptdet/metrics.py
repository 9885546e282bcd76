"""Detection mAP@0.5 and dense-map mIoU."""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .synthdata import BACKGROUND


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou_matrix(a, b):
    """Pairwise IoU of half-open boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh=0.5):
    """Greedy score-descending matching; returns a boolean TP flag per detection
    in score order, plus that order."""
    det_scores = np.asarray(det_scores, dtype=np.float64)
    order = np.argsort(-det_scores, kind="stable")
    ious = iou_matrix(np.asarray(det_boxes).reshape(-1, 4)[order], gt_boxes)
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for i in range(len(order)):
        if ious.shape[1] == 0:
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            tp[i] = True
    return tp, order


def ap_from_flags(tp, n_gt, interpolation="all"):
    """Area under the interpolated precision/recall curve."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    if interpolation == "11point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(det_boxes, det_scores, gt_boxes, iou_thresh=0.5, interpolation="all",
                      return_vacuous=False):
    """AP of one class at ``iou_thresh``.

    No GT and no detections gives 1.0 (vacuous); no GT with detections gives 0.0.
    """
    n_gt = len(np.asarray(gt_boxes).reshape(-1, 4))
    n_det = len(np.asarray(det_scores).reshape(-1))
    if n_gt == 0:
        ap, vacuous = (1.0, True) if n_det == 0 else (0.0, False)
    else:
        tp, _ = match_detections(det_boxes, det_scores, gt_boxes, iou_thresh)
        ap, vacuous = ap_from_flags(tp, n_gt, interpolation), False
    return (ap, vacuous) if return_vacuous else ap


@dataclass
class EvalReport:
    map_novel: float = float("nan")
    map_base: float = float("nan")
    map_overall: float = float("nan")
    per_class_ap: dict = field(default_factory=dict)
    miou_novel: float = float("nan")
    miou_base: float = float("nan")
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True, allow_nan=True)

    def table(self):
        lines = [f"{'class':<20}{'AP@0.5':>8}"]
        lines += [f"{k:<20}{v:>8.3f}" for k, v in self.per_class_ap.items()]
        lines += [f"{'mAP novel':<20}{self.map_novel:>8.3f}", f"{'mAP base':<20}{self.map_base:>8.3f}",
                  f"{'mAP overall':<20}{self.map_overall:>8.3f}"]
        return "\n".join(lines)


def evaluate_detections(detections, annotations, categories, iou_thresh=0.5, interpolation="all"):
    """mAP over base/novel/all classes.

    ``detections``: image_id -> list of ``(bbox, class_index, score)``.
    Classes with no GT anywhere are left out of the means.
    """
    per_class = {}
    for c, name in enumerate(categories.names):
        flags, scores, n_gt = [], [], 0
        for ann in annotations:
            gt = ann.boxes[ann.class_ids == c]
            n_gt += len(gt)
            dets = [d for d in detections.get(ann.image_id, []) if int(d[1]) == c]
            if not dets:
                continue
            boxes = np.asarray([d[0] for d in dets], dtype=np.float64)
            sc = np.asarray([d[2] for d in dets], dtype=np.float64)
            tp, order = match_detections(boxes, sc, gt, iou_thresh)
            flags.append(tp)
            scores.append(sc[order])
        if n_gt == 0:
            continue
        if flags:
            sc = np.concatenate(scores)
            order = np.argsort(-sc, kind="stable")
            tp = np.concatenate(flags)[order]
        else:
            tp = np.zeros(0, dtype=bool)
        per_class[name] = ap_from_flags(tp, n_gt, interpolation)

    def mean_over(indices):
        vals = [per_class[categories.names[i]] for i in indices if categories.names[i] in per_class]
        return float(np.mean(vals)) if vals else float("nan")

    return EvalReport(map_novel=mean_over(categories.novel_indices),
                      map_base=mean_over(categories.base_indices),
                      map_overall=mean_over(range(len(categories))),
                      per_class_ap=per_class,
                      config={"iou_thresh": iou_thresh, "interpolation": interpolation})


# ------------------------------------------------------------------ dense

def downsample_mask(mask, stride):
    """Majority vote per ``stride x stride`` cell; ties go to the smaller label."""
    mask = np.asarray(mask)
    h, w = mask.shape
    gh, gw = h // stride, w // stride
    cells = mask[:gh * stride, :gw * stride].reshape(gh, stride, gw, stride).transpose(0, 2, 1, 3)
    cells = cells.reshape(gh, gw, stride * stride)
    out = np.empty((gh, gw), dtype=np.int64)
    for i in range(gh):
        for j in range(gw):
            vals, counts = np.unique(cells[i, j], return_counts=True)
            out[i, j] = vals[np.argmax(counts)]
    return out


def restrict_predictions(pred, classes):
    """Map predicted labels outside ``classes`` to background."""
    pred = np.asarray(pred)
    return np.where(np.isin(pred, list(classes)), pred, BACKGROUND)


def threshold_predictions(scores, delta):
    """Argmax labels, set to background where the min-max normalised score
    of the winning class (per image and class) is below ``delta``.

    ``scores``: (B, P, |C|) array.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo = scores.min(axis=1, keepdims=True)
    hi = scores.max(axis=1, keepdims=True)
    norm = (scores - lo) / np.maximum(hi - lo, 1e-12)
    pred = scores.argmax(axis=-1)
    win = np.take_along_axis(norm, pred[..., None], axis=-1)[..., 0]
    return np.where(win >= delta, pred, BACKGROUND)


def mean_iou_dense(pred, gt, classes):
    """Mean IoU over ``classes`` present in ``gt``.

    ``pred`` is a label array (or a score array whose last axis is the class
    axis, reduced by argmax); labels outside ``classes`` count as background.
    Pixel sets are pooled over every image passed in. Returns NaN when no
    evaluated class occurs in ``gt``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.ndim == gt.ndim + 1:
        pred = pred.argmax(axis=-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    pred = restrict_predictions(pred, classes)
    ious = []
    for c in classes:
        g = gt == c
        if not g.any():
            continue
        p = pred == c
        ious.append((p & g).sum() / (p | g).sum())
    if not ious:
        warnings.warn("no evaluated class present in ground truth; mIoU undefined", RuntimeWarning)
        return float("nan")
    return float(np.mean(ious))
