"""Pseudo labels for non-base classes.

Each non-base column of the dense score map is thresholded into connected
regions, class-agnostic proposals are scored against those regions by mask
IoU and the best class per proposal is kept when it clears ``gamma``. The
module also holds the toy region-proposal network trained on base boxes.
"""

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F_
from scipy import ndimage

from . import binio
from .boxes import box_iou, clip_boxes, decode_deltas, encode_deltas, make_anchors, nms
from .exceptions import ConfigurationError, InputError, TrainingDivergenceError
from .validation import derive_seed
from .vlm import DenseScoreMap

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class Proposal:
    bbox: tuple
    objectness: float

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.bbox)
        if not (np.isfinite([x1, y1, x2, y2]).all() and x1 <= x2 and y1 <= y2):
            raise InputError(f"invalid proposal box {self.bbox}")
        if not 0.0 <= float(self.objectness) <= 1.0:
            raise InputError(f"objectness {self.objectness} outside [0, 1]")
        object.__setattr__(self, "bbox", (x1, y1, x2, y2))
        object.__setattr__(self, "objectness", float(self.objectness))


@dataclass
class ConnectedRegion:
    class_index: int
    mask: np.ndarray  # (H', W') bool
    bbox_hull: tuple  # image pixels, half-open

    @property
    def size(self):
        return int(self.mask.sum())

    def pixels(self):
        """Flat row-major indices of the region's grid pixels."""
        return np.flatnonzero(self.mask.ravel())


@dataclass(frozen=True)
class PseudoLabel:
    image_id: str
    bbox: tuple
    class_index: int
    confidence: float

    def to_json(self):
        return {"bbox": [float(v) for v in self.bbox], "category_index": int(self.class_index),
                "confidence": float(self.confidence)}


@dataclass(frozen=True)
class Thresholds:
    """``delta`` thresholds normalised score columns, ``gamma`` the mask IoU,
    ``objectness_min`` the proposals."""
    delta: float = 0.6
    gamma: float = 0.4
    objectness_min: float = 0.98

    def validate(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.objectness_min <= 1.0:
            raise ConfigurationError(f"objectness_min must lie in [0, 1], got {self.objectness_min}")
        return self

    def to_json(self):
        return {"delta": self.delta, "gamma": self.gamma, "objectness_min": self.objectness_min}


# ---------------------------------------------------------------- regions

_STRUCTURE = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


def hull_box(mask, stride):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]) * stride, int(rows[0]) * stride,
            (int(cols[-1]) + 1) * stride, (int(rows[-1]) + 1) * stride)


def connected_regions(score_column, delta, grid, stride=4, class_index=0, connectivity=4):
    """Connected components of ``{p : score_p >= delta}`` on the score grid.

    Regions are listed in row-major order of their first pixel. Pixels with
    a NaN or ``-inf`` score never enter a region.
    """
    if connectivity not in _STRUCTURE:
        raise ConfigurationError("connectivity must be 4 or 8")
    col = np.asarray(score_column, dtype=np.float64).reshape(grid)
    with np.errstate(invalid="ignore"):
        above = col >= delta
    labels, n = ndimage.label(above, structure=_STRUCTURE[connectivity])
    if n == 0:
        return []
    flat = labels.ravel()
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable") + 1
    out = []
    for lab in order:
        mask = labels == lab
        out.append(ConnectedRegion(int(class_index), mask, hull_box(mask, stride)))
    return out


def rasterize_box(bbox, grid, stride):
    """Grid cells whose centre lies in the half-open box ``[x1, x2) x [y1, y2)``."""
    gh, gw = grid
    x1, y1, x2, y2 = (float(v) for v in bbox)
    cx = (np.arange(gw) + 0.5) * stride
    cy = (np.arange(gh) + 0.5) * stride
    return ((cy >= y1) & (cy < y2))[:, None] & ((cx >= x1) & (cx < x2))[None, :]


def _mask_iou(box_mask, region_mask):
    inter = np.count_nonzero(box_mask & region_mask)
    union = np.count_nonzero(box_mask | region_mask)
    return inter / union if union else 0.0


def mask_iou(proposal, region, grid, stride=4):
    """IoU between the proposal box rasterised on the score grid and the region mask."""
    bbox = proposal.bbox if isinstance(proposal, Proposal) else proposal
    box_mask = rasterize_box(bbox, grid, stride)
    if not box_mask.any():
        warnings.warn(f"degenerate box {tuple(bbox)} covers no grid cell", RuntimeWarning)
        return 0.0
    region_mask = region.mask if isinstance(region, ConnectedRegion) else np.asarray(region, dtype=bool)
    return _mask_iou(box_mask, region_mask.reshape(grid))


def minmax_columns(values):
    """Scale every class column of a ``(P, |C|)`` array to [0, 1]; flat columns become 0."""
    lo = values.min(axis=0, keepdims=True)
    hi = values.max(axis=0, keepdims=True)
    span = hi - lo
    return np.where(span > 0, (values - lo) / np.where(span > 0, span, 1.0), 0.0)


def generate_pseudo_labels(S_full, proposals, thresholds, categories, image_id="", stride=4,
                           normalization="minmax", connectivity=4):
    """Pseudo labels for one image.

    Pixels whose argmax over all categories is a base class are removed
    from every non-base threshold set. Each qualifying proposal keeps only
    its best-scoring (class, region) pair, ties going to the earlier class
    and then the earlier region.
    """
    thresholds.validate()
    if normalization not in ("minmax", "none"):
        raise ConfigurationError(f"unknown normalization {normalization!r}")
    if isinstance(S_full, DenseScoreMap):
        if S_full.names and tuple(S_full.names) != tuple(categories.names):
            raise InputError("score map categories do not match the category set")
        values, grid = S_full.numpy(), tuple(S_full.grid)
    else:
        values, grid = S_full
        values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(categories):
        raise InputError(f"score map with {values.shape[-1]} columns for {len(categories)} categories")
    if values.shape[0] != grid[0] * grid[1]:
        raise InputError(f"score map rows {values.shape[0]} do not fill grid {grid}")

    base = np.zeros(len(categories), dtype=bool)
    base[list(categories.base_indices)] = True
    base_pixel = base[values.argmax(axis=1)]
    scores = minmax_columns(values) if normalization == "minmax" else values
    regions = []
    for c in range(len(categories)):
        if base[c]:
            continue
        col = np.where(base_pixel, -np.inf, scores[:, c])
        regions.extend(connected_regions(col, thresholds.delta, grid, stride, c, connectivity))

    out = []
    for p in proposals:
        if p.objectness < thresholds.objectness_min:
            continue
        box_mask = rasterize_box(p.bbox, grid, stride)
        if not box_mask.any():
            continue
        best, best_score = None, -1.0
        for r in regions:
            score = _mask_iou(box_mask, r.mask)
            if score >= thresholds.gamma and score > best_score:
                best, best_score = r, score
        if best is not None:
            out.append(PseudoLabel(image_id, p.bbox, best.class_index, float(best_score)))
    return out


# ------------------------------------------------------------- proposals

@dataclass
class RPNConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 3e-3
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    samples_per_image: int = 64
    pre_nms_top: int = 200
    nms_iou: float = 0.7
    top_k: int = 20
    seed: int = 0


class ToyRPN(torch.nn.Module):
    """Small conv backbone with a 1x1 objectness/regression head over fixed anchors."""

    def __init__(self, image_size=(48, 48), channels=(16, 32), kernel=5, sizes=(12, 16, 20),
                 ratios=(0.75, 1.0, 1.333), seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(derive_seed(seed, "rpn-init") % (2 ** 31))
        layers, c_in = [], 3
        for c in channels:
            layers.append(torch.nn.Conv2d(c_in, c, kernel, stride=2, padding=kernel // 2))
            c_in = c
        layers.append(torch.nn.Conv2d(c_in, c_in, 3, padding=1))
        self.convs = torch.nn.ModuleList(layers)
        self.n_anchor_shapes = len(sizes) * len(ratios)
        self.head = torch.nn.Conv2d(c_in, 5 * self.n_anchor_shapes, 1)
        for m in list(self.convs) + [self.head]:
            bound = 1.0 / np.sqrt(m.weight[0].numel())
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()
        self.image_size = tuple(image_size)
        self.stride = 2 ** len(channels)
        self.grid = (image_size[0] // self.stride, image_size[1] // self.stride)
        self.sizes, self.ratios = tuple(sizes), tuple(ratios)
        self.register_buffer("anchors", make_anchors(self.grid, self.stride, sizes, ratios).float())

    @property
    def feature_channels(self):
        return self.convs[-1].out_channels

    def features(self, x):
        """Backbone feature map (B, C, H', W') of centred pixels ``x``."""
        for conv in self.convs:
            x = F_.relu(conv(x))
        return x

    def heads(self, feats):
        """Objectness logits (B, N) and anchor deltas (B, N, 4)."""
        out = self.head(feats)
        b, _, gh, gw = out.shape
        out = out.permute(0, 2, 3, 1).reshape(b, gh * gw, self.n_anchor_shapes, 5)
        return out[..., 0].reshape(b, -1), out[..., 1:].reshape(b, -1, 4)

    def forward(self, x):
        """``x`` (B, 3, H, W) centred pixels -> objectness logits (B, N) and deltas (B, N, 4)."""
        return self.heads(self.features(x))


def image_tensor(images, dtype=torch.float32):
    arrs = [im.pixels if hasattr(im, "pixels") else im for im in images]
    return torch.as_tensor(np.stack(arrs), dtype=dtype).permute(0, 3, 1, 2) - 0.5


def anchor_targets(anchors, gt_boxes, pos_iou, neg_iou):
    """Labels 1 / 0 / -1 (ignore) per anchor and the matched GT index."""
    n = len(anchors)
    labels = torch.full((n,), -1, dtype=torch.long)
    matched = torch.full((n,), -1, dtype=torch.long)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = box_iou(anchors, gt_boxes)
    best, arg = ious.max(dim=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    # every GT keeps its best anchor
    labels[ious.argmax(dim=0)] = 1
    matched[labels == 1] = arg[labels == 1]
    matched[ious.argmax(dim=0)] = torch.arange(len(gt_boxes))
    return labels, matched


def rpn_loss(rpn, logits, deltas, targets, gt_boxes, samples_per_image, rng):
    """Sampled objectness BCE plus smooth-L1 anchor regression, averaged over images.

    At most half of each image's ``samples_per_image`` anchors are positive.
    """
    cls_terms, reg_terms = [], []
    for k, ((labels, matched), boxes) in enumerate(zip(targets, gt_boxes)):
        pos = torch.nonzero(labels == 1).ravel()[:samples_per_image // 2]
        neg = torch.nonzero(labels == 0).ravel()
        n_neg = min(len(neg), samples_per_image - len(pos))
        neg = neg[torch.as_tensor(rng.permutation(len(neg))[:n_neg], dtype=torch.long)]
        sel = torch.cat([pos, neg])
        cls_terms.append(F_.binary_cross_entropy_with_logits(
            logits[k, sel], (labels[sel] == 1).to(logits.dtype), reduction="sum") / max(len(sel), 1))
        if len(pos):
            tgt = encode_deltas(rpn.anchors[pos].to(boxes.dtype), boxes[matched[pos]])
            reg_terms.append(F_.smooth_l1_loss(deltas[k, pos], tgt.to(deltas.dtype), beta=1 / 9))
    loss = torch.stack(cls_terms).mean()
    if reg_terms:
        loss = loss + torch.stack(reg_terms).mean()
    return loss


def train_rpn(images, annotations, allowed_classes, cfg=None, rpn=None):
    """Fit a :class:`ToyRPN` on the boxes of ``allowed_classes`` only.

    ``annotations`` may be scene annotations or ``(image_id, boxes, classes)``
    triples. Returns ``(rpn, training_log)``; the log lists every GT box that
    produced anchor targets, with its class, for auditing.
    """
    cfg = cfg or RPNConfig()
    allowed = set(int(c) for c in allowed_classes)
    h, w = (images[0].pixels if hasattr(images[0], "pixels") else images[0]).shape[:2]
    rpn = rpn or ToyRPN((h, w), seed=cfg.seed)
    boxes_per_image, train_log = [], []
    for ann in annotations:
        image_id, boxes, classes = (ann.image_id, ann.boxes, ann.class_ids) if hasattr(ann, "boxes") else ann
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        keep = np.asarray([int(c) in allowed for c in classes], dtype=bool)
        for i in np.flatnonzero(keep):
            train_log.append({"image_id": image_id, "bbox": boxes[i].tolist(), "class_index": int(classes[i])})
        boxes_per_image.append(torch.as_tensor(boxes[keep], dtype=torch.float32))
    targets = [anchor_targets(rpn.anchors, b, cfg.pos_iou, cfg.neg_iou) for b in boxes_per_image]
    x_all = image_tensor(images)
    opt = torch.optim.Adam(rpn.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "rpn-order"))
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits, deltas = rpn(x_all[torch.as_tensor(idx)])
            loss = rpn_loss(rpn, logits, deltas, [targets[i] for i in idx],
                            [boxes_per_image[i] for i in idx], cfg.samples_per_image, rng)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("rpn", f"epoch{epoch}/batch{b}", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.info("rpn epoch %d loss %.4f", epoch, loss.item())
    rpn.eval()
    for p in rpn.parameters():
        p.requires_grad_(False)
    return rpn, train_log


def audit_training_log(train_log, allowed_classes):
    """Entries of ``train_log`` whose class is outside ``allowed_classes``."""
    allowed = set(int(c) for c in allowed_classes)
    return [e for e in train_log if int(e["class_index"]) not in allowed]


def propose_regions_rpn_batch(images, rpn, objectness_min=0.0, top_k=None, nms_iou=None,
                              pre_nms_top=200):
    """Class-agnostic proposals for several images, each sorted by objectness descending."""
    top_k = top_k or RPNConfig.top_k
    nms_iou = nms_iou if nms_iou is not None else RPNConfig.nms_iou
    if len(images) == 0:
        return []
    with torch.no_grad():
        logits, deltas = rpn(image_tensor(images))
    h, w = rpn.image_size
    out = []
    for k in range(len(images)):
        obj = torch.sigmoid(logits[k].double())
        top = torch.argsort(-obj, stable=True)[:pre_nms_top]
        boxes = clip_boxes(decode_deltas(rpn.anchors[top].double(), deltas[k, top].double()), h, w)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
        boxes, scores = boxes[ok], obj[top][ok]
        keep = nms(boxes, scores, torch.zeros(len(boxes), dtype=torch.long), nms_iou)[:top_k]
        props = [Proposal(tuple(float(v) for v in boxes[i]), float(scores[i])) for i in keep]
        out.append([p for p in props if p.objectness >= objectness_min])
    return out


def propose_regions_rpn(image, rpn, objectness_min=0.0, top_k=None, nms_iou=None):
    """Proposals for one image, objectness descending."""
    return propose_regions_rpn_batch([image], rpn, objectness_min, top_k, nms_iou)[0]


def oracle_proposals(annotation, jitter=1.0, seed=0, objectness_min=0.0):
    """Ground-truth boxes with uniform coordinate jitter and objectness 1."""
    rng = np.random.default_rng(derive_seed(seed, "oracle-proposals", annotation.image_id))
    h, w = annotation.dense_mask.shape
    out = []
    for box in np.asarray(annotation.boxes, dtype=np.float64).reshape(-1, 4):
        b = box + rng.uniform(-jitter, jitter, size=4)
        b = np.clip(b, 0, [w, h, w, h])
        if b[2] > b[0] and b[3] > b[1]:
            out.append(Proposal(tuple(b), 1.0))
    return [p for p in out if p.objectness >= objectness_min]


def rpn_tensors(rpn, prefix="rpn."):
    return {prefix + k: v.detach().cpu().numpy() for k, v in rpn.state_dict().items()}


def rpn_meta(rpn):
    return {"image_size": list(rpn.image_size), "channels": [c.out_channels for c in rpn.convs[:-1]],
            "kernel": rpn.convs[0].kernel_size[0], "sizes": list(rpn.sizes), "ratios": list(rpn.ratios)}


def rpn_from_tensors(tensors, meta, prefix="rpn."):
    rpn = ToyRPN(tuple(meta["image_size"]), tuple(meta["channels"]), meta["kernel"],
                 tuple(meta["sizes"]), tuple(meta["ratios"]))
    rpn.load_state_dict({k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items()
                         if k.startswith(prefix)})
    rpn.eval()
    for p in rpn.parameters():
        p.requires_grad_(False)
    return rpn


def save_rpn(path, rpn, extra_meta=None):
    binio.write_checkpoint(path, rpn_tensors(rpn), {"rpn": rpn_meta(rpn), **(extra_meta or {})})


def load_rpn(path):
    tensors, meta = binio.read_checkpoint(path)
    return rpn_from_tensors(tensors, meta["rpn"])


# ------------------------------------------------------------------- files

def write_pseudo_labels(path, labels_by_image, thresholds, normalization="minmax", extra=None):
    """JSON document with one entry per image id (sorted)."""
    doc = {"thresholds": thresholds.to_json(), "normalization": normalization,
           "images": [{"image_id": k, "labels": [lab.to_json() for lab in labels_by_image[k]]}
                      for k in sorted(labels_by_image)]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_pseudo_labels(path):
    """Return ``(labels_by_image, document)``."""
    doc = json.loads(Path(path).read_text())
    out = {}
    for entry in doc["images"]:
        out[entry["image_id"]] = [PseudoLabel(entry["image_id"], tuple(l["bbox"]), int(l["category_index"]),
                                              float(l["confidence"])) for l in entry["labels"]]
    return out, doc
