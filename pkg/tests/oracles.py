"""Independent reference implementations used as test oracles.

Everything here is written with plain loops and sets and shares no code
with the package beyond its data types, so agreement is meaningful.
"""

import math

import numpy as np
import torch


# ------------------------------------------------------------ flood fill

def flood_fill_regions(above, connectivity=4):
    """Components of a boolean grid as lists of (row, col), ordered by their
    first pixel in row-major order. Iterative depth-first fill."""
    h, w = above.shape
    seen = np.zeros_like(above, dtype=bool)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    regions = []
    for y in range(h):
        for x in range(w):
            if not above[y, x] or seen[y, x]:
                continue
            stack, pixels = [(y, x)], []
            seen[y, x] = True
            while stack:
                cy, cx = stack.pop()
                pixels.append((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and above[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            regions.append(sorted(pixels))
    return regions


# ----------------------------------------------------------- mask IoU

def box_cells(bbox, grid, stride):
    """Set of (row, col) cells whose centre lies in the half-open box."""
    x1, y1, x2, y2 = bbox
    cells = set()
    for r in range(grid[0]):
        for c in range(grid[1]):
            cx, cy = (c + 0.5) * stride, (r + 0.5) * stride
            if x1 <= cx < x2 and y1 <= cy < y2:
                cells.add((r, c))
    return cells


def pixel_set_iou(cells_a, cells_b):
    union = cells_a | cells_b
    return len(cells_a & cells_b) / len(union) if union else 0.0


# ------------------------------------------------------------------ AP

def box_iou_scalar(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(det_boxes, det_scores, gt_boxes, iou_thresh=0.5):
    """AP as the exact area under the monotone envelope of the PR curve.

    Detections are visited in descending score order (earlier index first on
    ties); each takes the unmatched ground truth of highest IoU (earliest on
    ties) if that IoU reaches the threshold. Precision and recall are
    recomputed from scratch at every cut-off.
    """
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return 1.0 if len(det_boxes) == 0 else 0.0
    order = sorted(range(len(det_scores)), key=lambda i: -det_scores[i])
    taken = set()
    flags = []
    for i in order:
        best_j, best_iou = None, -1.0
        for j in range(n_gt):
            if j in taken:
                continue
            iou = box_iou_scalar(det_boxes[i], gt_boxes[j])
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j is not None and best_iou >= iou_thresh:
            taken.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    points = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        points.append((tp / n_gt, tp / k))
    recalls = sorted({0.0} | {r for r, _ in points})
    ap = 0.0
    for lo, hi in zip(recalls[:-1], recalls[1:]):
        ap += (hi - lo) * max(p for r, p in points if r >= hi)
    return ap


# ----------------------------------------------------- pseudo labels

def pseudo_label_oracle(values, grid, base_flags, proposals, delta, gamma, objectness_min, stride=4):
    """Whole pseudo-labelling pipeline with explicit loops.

    ``values`` (P, |C|) raw scores; ``proposals`` list of (bbox, objectness).
    Returns a list of (proposal index, class, confidence).
    """
    n_pix, n_cls = len(values), len(values[0])
    base_pixel = []
    for p in range(n_pix):
        best = 0
        for c in range(1, n_cls):
            if values[p][c] > values[p][best]:
                best = c
        base_pixel.append(base_flags[best])
    regions = []
    for c in range(n_cls):
        if base_flags[c]:
            continue
        col = [values[p][c] for p in range(n_pix)]
        lo, hi = min(col), max(col)
        norm = [(v - lo) / (hi - lo) if hi > lo else 0.0 for v in col]
        above = np.zeros(grid, dtype=bool)
        for p in range(n_pix):
            if not base_pixel[p] and norm[p] >= delta:
                above[p // grid[1], p % grid[1]] = True
        for pixels in flood_fill_regions(above):
            regions.append((c, set(pixels)))
    out = []
    for k, (bbox, obj) in enumerate(proposals):
        if obj < objectness_min:
            continue
        cells = box_cells(bbox, grid, stride)
        if not cells:
            continue
        best = None
        for c, pixels in regions:
            iou = pixel_set_iou(cells, pixels)
            if iou >= gamma and (best is None or iou > best[1]):
                best = (c, iou)
        if best is not None:
            out.append((k, best[0], best[1]))
    return out


# -------------------------------------------------------- detector bits

def assignment_oracle(proposals, boxes, classes, iou_fg, iou_bg, background, ignore):
    labels = []
    for p in proposals:
        best_j, best = None, -1.0
        for j, b in enumerate(boxes):
            iou = box_iou_scalar(p, b)
            if iou > best:
                best_j, best = j, iou
        if best_j is None or best < iou_bg:
            labels.append(background)
        elif best >= iou_fg:
            labels.append(int(classes[best_j]))
        else:
            labels.append(ignore)
    return labels


def greedy_nms_oracle(boxes, scores, classes, iou_thresh):
    """O(n^2) greedy suppression per class; survivors in score order."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    kept = []
    for i in order:
        if all(classes[k] != classes[i] or box_iou_scalar(boxes[i], boxes[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return kept


def softmax_ce(logits, target):
    m = max(logits)
    log_z = m + math.log(sum(math.exp(v - m) for v in logits))
    return log_z - logits[target]


# ------------------------------------------------- finite differences

def gradient_errors(loss_fn, params, eps=1e-6):
    """Relative error between autograd and central differences, per tensor.

    ``loss_fn()`` must return a scalar built from ``params`` (float64). The
    error is ``max|a - n| / max(max|a|, max|n|, 1e-10)``.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    errors = []
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            num = torch.zeros_like(p)
            flat, nflat = p.view(-1), num.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                nflat[i] = (up - down) / (2 * eps)
            scale = max(a.abs().max().item(), num.abs().max().item(), 1e-10)
            errors.append((a - num).abs().max().item() / scale)
    return errors
