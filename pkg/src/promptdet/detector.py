"""Two-stage toy detector whose classification layer is a frozen matrix of
class text embeddings, plus its self-training on base boxes and pseudo labels."""

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F_
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torchvision.ops import roi_align

from . import binio
from .boxes import box_iou, clip_boxes, decode_deltas, encode_deltas, nms
from .exceptions import ConfigurationError, InputError, ShapeError, TrainingDivergenceError
from .pseudolabel import (ToyRPN, anchor_targets, image_tensor, rpn_from_tensors, rpn_loss,
                          rpn_meta, rpn_tensors)
from .synthdata import BACKGROUND
from .validation import derive_seed, state_hash

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass
class TrainingTarget:
    labels: torch.Tensor  # (N,) class index, BACKGROUND or IGNORE
    deltas: torch.Tensor  # (N, 4), zero outside the foreground

    @property
    def foreground(self):
        return (self.labels != BACKGROUND) & (self.labels != IGNORE)


def assign_targets(proposals, boxes, classes, iou_fg=0.5, iou_bg=0.5):
    """Match every proposal to its best-IoU labelled box.

    IoU >= ``iou_fg`` gives that box's class, IoU < ``iou_bg`` gives
    ``BACKGROUND`` and anything in between is ``IGNORE``. Ties go to the
    earlier box.
    """
    if iou_bg > iou_fg:
        raise ConfigurationError(f"iou_bg {iou_bg} exceeds iou_fg {iou_fg}")
    proposals = torch.as_tensor(proposals, dtype=torch.float64).reshape(-1, 4)
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    n = len(proposals)
    labels = torch.full((n,), BACKGROUND, dtype=torch.long)
    deltas = torch.zeros(n, 4, dtype=torch.float64)
    if n == 0 or len(boxes) == 0:
        return TrainingTarget(labels, deltas)
    best, arg = box_iou(proposals, boxes).max(dim=1)
    fg = best >= iou_fg
    labels[(best >= iou_bg) & ~fg] = IGNORE
    labels[fg] = classes[arg[fg]]
    if fg.any():
        deltas[fg] = encode_deltas(proposals[fg], boxes[arg[fg]])
    return TrainingTarget(labels, deltas)


def selftrain_loss(logits, reg_pred, target):
    """``(L_CLS, L_REG, L_T)``.

    ``logits`` has one column per class followed by the background column.
    L_CLS is the mean cross-entropy over non-ignored ROIs and L_REG the mean
    absolute error of the regression over foreground ROIs (0 without any).
    """
    labels = torch.as_tensor(target.labels)
    if logits.shape[0] != labels.shape[0] or reg_pred.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows, {reg_pred.shape[0]} regressions, "
                         f"{labels.shape[0]} targets")
    n_cls = logits.shape[1] - 1
    keep = labels != IGNORE
    cls_target = torch.where(labels == BACKGROUND, torch.full_like(labels, n_cls), labels)
    if keep.any():
        l_cls = F_.cross_entropy(logits[keep], cls_target[keep])
    else:
        l_cls = logits.sum() * 0.0
    fg = target.foreground
    if fg.any():
        l_reg = (reg_pred[fg] - torch.as_tensor(target.deltas, dtype=reg_pred.dtype)[fg]).abs().mean()
    else:
        l_reg = reg_pred.sum() * 0.0
    return l_cls, l_reg, l_cls + l_reg


def embedding_logits(roi_embeddings, class_rows, background_row, temperature):
    """Cosine logits against the class rows, background last."""
    rows = torch.cat([class_rows, background_row[None]], dim=0)
    return F_.normalize(roi_embeddings, dim=-1) @ F_.normalize(rows, dim=-1).T / temperature


class DetectorParams(torch.nn.Module):
    """Shared backbone with an RPN head, an ROI head projecting to the text
    embedding width, a class-agnostic box regressor and a frozen classifier."""

    def __init__(self, class_rows, image_size=(48, 48), roi_size=4, hidden=128, temperature=0.07, seed=0):
        super().__init__()
        class_rows = torch.as_tensor(class_rows, dtype=torch.float32)
        self.rpn = ToyRPN(image_size, channels=(32, 64), seed=derive_seed(seed, "detector-rpn"))
        gen = torch.Generator().manual_seed(derive_seed(seed, "detector-head") % (2 ** 31))
        c = self.rpn.feature_channels
        self.roi_size = roi_size
        self.fc = torch.nn.Linear(c * roi_size * roi_size, hidden)
        self.embed = torch.nn.Linear(hidden, class_rows.shape[1])
        self.reg = torch.nn.Linear(hidden, 4)
        for lin in (self.fc, self.embed, self.reg):
            bound = 1.0 / np.sqrt(lin.in_features)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.zero_()
        with torch.no_grad():
            self.reg.weight.mul_(0.1)
        self.register_buffer("class_rows", class_rows.clone())
        self.background_row = torch.nn.Parameter(torch.randn(class_rows.shape[1], generator=gen) * 0.1)
        self.temperature = temperature

    @property
    def n_classes(self):
        return self.class_rows.shape[0]

    @property
    def dim(self):
        return self.class_rows.shape[1]

    def classifier_hash(self):
        return state_hash({"class_rows": self.class_rows})

    def with_classifier(self, class_rows):
        """Copy that scores against other class embeddings; nothing else changes."""
        rows = torch.as_tensor(class_rows, dtype=self.class_rows.dtype)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"classifier rows must be (K, {self.dim}), got {tuple(rows.shape)}")
        other = copy.deepcopy(self)
        other.class_rows = rows.clone()
        return other

    def roi_head(self, feats, rois):
        """``rois`` (K, 5) as (batch index, x1, y1, x2, y2) -> (embeddings, deltas)."""
        pooled = roi_align(feats, rois, self.roi_size, spatial_scale=1.0 / self.rpn.stride,
                           sampling_ratio=2, aligned=True)
        h = F_.relu(self.fc(pooled.flatten(1)))
        return self.embed(h), self.reg(h)

    def logits(self, embeddings):
        return embedding_logits(embeddings, self.class_rows, self.background_row, self.temperature)


@dataclass
class DetectorConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.07
    iou_fg: float = 0.5
    iou_bg: float = 0.5
    proposals_per_image: int = 32
    jitter_copies: int = 4
    bg_per_image: int = 24
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigurationError("lr and temperature must be positive")
        if self.iou_bg > self.iou_fg:
            raise ConfigurationError("iou_bg must not exceed iou_fg")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        return self


def milestones(epochs):
    """Epochs at which the learning rate drops tenfold (2/3 and 11/12 of the run)."""
    return sorted({int(round(epochs * 2 / 3)), int(round(epochs * 11 / 12))} - {0})


def training_boxes(annotations, pseudo_labels, base_indices):
    """Per image: base ground truth followed by pseudo-label boxes and classes."""
    base = set(int(c) for c in base_indices)
    out = []
    for ann in annotations:
        keep = np.asarray([int(c) in base for c in ann.class_ids], dtype=bool)
        boxes = [np.asarray(ann.boxes, dtype=np.float64).reshape(-1, 4)[keep]]
        classes = [np.asarray(ann.class_ids, dtype=np.int64)[keep]]
        for lab in (pseudo_labels or {}).get(ann.image_id, []):
            boxes.append(np.asarray(lab.bbox, dtype=np.float64).reshape(1, 4))
            classes.append(np.asarray([lab.class_index], dtype=np.int64))
        out.append((np.concatenate(boxes), np.concatenate(classes)))
    return out


def _jitter(boxes, copies, rng, scale=0.15):
    if copies == 0 or len(boxes) == 0:
        return np.zeros((0, 4))
    wh = np.concatenate([boxes[:, 2:] - boxes[:, :2]] * 2, axis=1)
    reps = np.repeat(boxes, copies, axis=0)
    return reps + rng.uniform(-scale, scale, size=reps.shape) * np.repeat(wh, copies, axis=0)


def train_detector(images, annotations, pseudo_labels, class_rows, categories, cfg=None, params=None):
    """Self-train a detector on base ground truth plus non-base pseudo labels.

    ``pseudo_labels`` maps image id to :class:`PseudoLabel` lists (``None``
    or empty for the no-pseudo baseline). Returns ``(params, history)``.
    """
    cfg = (cfg or DetectorConfig()).validate()
    class_rows = torch.as_tensor(class_rows, dtype=torch.float32)
    if class_rows.shape[0] != len(categories):
        raise InputError(f"{class_rows.shape[0]} classifier rows for {len(categories)} categories")
    if len(images) != len(annotations):
        raise InputError("images and annotations differ in length")
    h, w = (images[0].pixels if hasattr(images[0], "pixels") else images[0]).shape[:2]
    params = params or DetectorParams(class_rows, (h, w), temperature=cfg.temperature, seed=cfg.seed)
    frozen_hash = params.classifier_hash()
    labelled = training_boxes(annotations, pseudo_labels, categories.base_indices)
    gt_t = [torch.as_tensor(b, dtype=torch.float32) for b, _ in labelled]
    anchor_tg = [anchor_targets(params.rpn.anchors, b, 0.5, 0.3) for b in gt_t]
    x_all = image_tensor(images)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(params.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
    steps = max(1, -(-len(images) // cfg.batch_size))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [m * steps for m in milestones(cfg.epochs)], 0.1)
    rng = np.random.default_rng(derive_seed(cfg.seed, "detector-order"))
    history = []
    params.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        sums = np.zeros(4)
        for b, start in enumerate(range(0, len(images), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            feats = params.rpn.features(x_all[torch.as_tensor(idx)])
            obj, deltas = params.rpn.heads(feats)
            l_rpn = rpn_loss(params.rpn, obj, deltas, [anchor_tg[i] for i in idx], [gt_t[i] for i in idx],
                             64, rng)
            rois, targets = [], []
            for k, i in enumerate(idx):
                props = _proposals_from_heads(params, obj[k].detach(), deltas[k].detach(), h, w,
                                              cfg.proposals_per_image)
                boxes, classes = labelled[i]
                cand = np.concatenate([props, boxes, _jitter(boxes, cfg.jitter_copies, rng)])
                tgt = assign_targets(cand, boxes, classes, cfg.iou_fg, cfg.iou_bg)
                fg = torch.nonzero(tgt.foreground).ravel()
                bg = torch.nonzero(tgt.labels == BACKGROUND).ravel()
                bg = bg[torch.as_tensor(rng.permutation(len(bg))[:cfg.bg_per_image], dtype=torch.long)]
                sel = torch.cat([fg, bg])
                rois.append(torch.cat([torch.full((len(sel), 1), float(k), dtype=torch.float64),
                                       torch.as_tensor(cand)[sel]], dim=1))
                targets.append(TrainingTarget(tgt.labels[sel], tgt.deltas[sel]))
            emb, reg = params.roi_head(feats, torch.cat(rois).float())
            target = TrainingTarget(torch.cat([t.labels for t in targets]), torch.cat([t.deltas for t in targets]))
            l_cls, l_reg, l_t = selftrain_loss(params.logits(emb), reg, target)
            loss = l_t + l_rpn
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("train-detector", f"epoch{epoch}/batch{b}", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            sums += [l_cls.item(), l_reg.item(), l_rpn.item(), 1]
        rec = {"epoch": epoch, "l_cls": sums[0] / sums[3], "l_reg": sums[1] / sums[3],
               "l_rpn": sums[2] / sums[3], "lr": opt.param_groups[0]["lr"]}
        history.append(rec)
        log.info("detector epoch %d %s", epoch, rec)
    params.eval()
    if params.classifier_hash() != frozen_hash:
        raise RuntimeError("classifier rows changed during training")
    return params, history


def _proposals_from_heads(params, obj, deltas, h, w, top_k, nms_iou=0.7, pre_nms_top=200):
    scores = torch.sigmoid(obj.double())
    top = torch.argsort(-scores, stable=True)[:pre_nms_top]
    boxes = clip_boxes(decode_deltas(params.rpn.anchors[top].double(), deltas[top].double()), h, w)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
    boxes, scores = boxes[ok], scores[top][ok]
    keep = nms(boxes, scores, torch.zeros(len(boxes), dtype=torch.long), nms_iou)[:top_k]
    return boxes[keep].numpy()


def infer_detect(params, images, score_thresh=0.05, nms_iou=0.5, class_rows=None, proposals_per_image=32,
                 max_detections=100):
    """Detections per image as lists of ``(bbox, class_index, score)``.

    Passing ``class_rows`` scores against another category set without
    retraining.
    """
    if class_rows is not None:
        params = params.with_classifier(class_rows)
    if len(images) == 0:
        return []
    h, w = params.rpn.image_size
    out = []
    with torch.no_grad():
        x = image_tensor(images)
        feats = params.rpn.features(x)
        obj, deltas = params.rpn.heads(feats)
        for k in range(len(images)):
            props = _proposals_from_heads(params, obj[k], deltas[k], h, w, proposals_per_image)
            if len(props) == 0:
                out.append([])
                continue
            rois = torch.cat([torch.full((len(props), 1), float(k)), torch.as_tensor(props).float()], dim=1)
            emb, reg = params.roi_head(feats, rois)
            probs = torch.softmax(params.logits(emb).double(), dim=-1)[:, :-1]
            boxes = clip_boxes(decode_deltas(torch.as_tensor(props), reg.double()), h, w)
            roi_idx, cls_idx = torch.nonzero(probs >= score_thresh, as_tuple=True)
            sc = probs[roi_idx, cls_idx]
            bx = boxes[roi_idx]
            ok = ((bx[:, 2] - bx[:, 0]) > 0) & ((bx[:, 3] - bx[:, 1]) > 0)
            bx, sc, cls_idx = bx[ok], sc[ok], cls_idx[ok]
            keep = nms(bx, sc, cls_idx, nms_iou)[:max_detections]
            out.append([(tuple(float(v) for v in bx[i]), int(cls_idx[i]), float(sc[i])) for i in keep])
    return out


# -------------------------------------------------------------- checkpoints

def save_detector(path, params, meta=None):
    tensors = {"detector." + k: v.detach().cpu().numpy() for k, v in params.state_dict().items()
               if not k.startswith("rpn.")}
    tensors.update(rpn_tensors(params.rpn, "detector.rpn."))
    info = {"rpn": rpn_meta(params.rpn), "roi_size": params.roi_size, "hidden": params.fc.out_features,
            "temperature": params.temperature}
    binio.write_checkpoint(path, tensors, {"detector": info, **(meta or {})})


def load_detector(path):
    tensors, meta = binio.read_checkpoint(path)
    info = meta["detector"]
    rows = tensors["detector.class_rows"]
    params = DetectorParams(rows, tuple(info["rpn"]["image_size"]), info["roi_size"], info["hidden"],
                            info["temperature"])
    params.rpn = rpn_from_tensors(tensors, info["rpn"], "detector.rpn.")
    params.load_state_dict({k[len("detector."):]: torch.from_numpy(v.copy()) for k, v in tensors.items()
                            if k.startswith("detector.")})
    params.eval()
    return params, meta


class OpenVocabDetector(BaseEstimator):
    """``fit`` self-trains on base boxes plus pseudo labels; ``predict`` detects."""

    def __init__(self, epochs=12, batch_size=16, lr=1e-3, temperature=0.07, score_thresh=0.05,
                 nms_iou=0.5, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.temperature = temperature
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou
        self.seed = seed

    def fit(self, images, annotations, class_rows, categories, pseudo_labels=None):
        cfg = DetectorConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             temperature=self.temperature, seed=self.seed)
        self.params_, self.history_ = train_detector(images, annotations, pseudo_labels, class_rows,
                                                     categories, cfg)
        self.categories_ = categories
        return self

    def predict(self, images, class_rows=None):
        check_is_fitted(self, "params_")
        return infer_detect(self.params_, images, self.score_thresh, self.nms_iou, class_rows)
