"""Box geometry shared by the region proposer and the detector."""

import numpy as np
import torch
from torchvision.ops import batched_nms

BBOX_CLIP = float(np.log(1000.0 / 16))


def make_anchors(grid, stride, sizes=(12, 16, 20), ratios=(0.75, 1.0, 1.333)):
    """Anchors centred on every grid cell, ``(H'*W'*A, 4)`` in image pixels.

    Order is row-major over cells, then sizes, then ratios.
    """
    gh, gw = grid
    shapes = []
    for s in sizes:
        for r in ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            shapes.append((w, h))
    shapes = np.asarray(shapes)
    cy, cx = np.meshgrid((np.arange(gh) + 0.5) * stride, (np.arange(gw) + 0.5) * stride, indexing="ij")
    centres = np.stack([cx.ravel(), cy.ravel()], axis=1)
    half = shapes / 2
    boxes = np.concatenate([centres[:, None, :] - half[None], centres[:, None, :] + half[None]], axis=-1)
    return torch.as_tensor(boxes.reshape(-1, 4))


def encode_deltas(boxes, targets):
    """Standard ``(dx, dy, dw, dh)`` parameterisation of ``targets`` relative to ``boxes``."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return torch.stack([(tcx - cx) / w, (tcy - cy) / h, torch.log(tw / w), torch.log(th / h)], dim=1)


def decode_deltas(boxes, deltas):
    """Inverse of :func:`encode_deltas`; width/height deltas are clamped."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    dw = deltas[:, 2].clamp(max=BBOX_CLIP)
    dh = deltas[:, 3].clamp(max=BBOX_CLIP)
    pcx = deltas[:, 0] * w + cx
    pcy = deltas[:, 1] * h + cy
    pw = torch.exp(dw) * w
    ph = torch.exp(dh) * h
    return torch.stack([pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph], dim=1)


def clip_boxes(boxes, height, width):
    out = boxes.clone()
    out[:, 0::2] = out[:, 0::2].clamp(0, width)
    out[:, 1::2] = out[:, 1::2].clamp(0, height)
    return out


def box_iou(a, b):
    """Pairwise IoU of two ``(N, 4)`` / ``(M, 4)`` tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def nms(boxes, scores, classes, iou_thresh):
    """Per-class greedy non-maximum suppression; kept indices in score order."""
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)
    scores = torch.as_tensor(scores, dtype=torch.float64)
    classes = torch.as_tensor(classes, dtype=torch.long)
    return batched_nms(boxes, scores, classes, iou_thresh)
