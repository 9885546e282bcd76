"""Prompt adapting stage: fit only the prompt modules so the prompted model
reproduces the frozen model's dense argmax map."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F_
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, InputError, TrainingDivergenceError
from .metrics import downsample_mask, mean_iou_dense, threshold_predictions
from .prompts import TextPrompt, VisualPrompt, prompted_class_embeddings, save_prompts
from .validation import check_positive, derive_seed
from .vlm import DenseScoreMap, class_embeddings, encode_images_dense, normalize_rows

log = logging.getLogger(__name__)

ABLATION_MODES = ("none", "hand", "text", "visual", "both")


@dataclass
class DenseTargetMap:
    labels: np.ndarray  # (P,) int
    valid_mask: np.ndarray  # (P,) bool
    probs: np.ndarray = None  # optional (P, |C|) soft targets


def smooth_scores(values, grid, radius):
    """Box-average a (B, P, |C|) score tensor over (2r+1)^2 grid neighbourhoods."""
    if radius <= 0:
        return values
    b, p, c = values.shape
    x = values.permute(0, 2, 1).reshape(b, c, *grid)
    x = F_.avg_pool2d(x, 2 * radius + 1, stride=1, padding=radius, count_include_pad=False)
    return x.reshape(b, c, p).permute(0, 2, 1)


def build_target_map(S, grid=None, smoothing=0):
    """Per-pixel argmax (first index wins ties); every pixel valid.

    ``smoothing`` > 0 box-averages the scores over the score grid first.
    """
    values = S.numpy() if isinstance(S, DenseScoreMap) else np.asarray(S, dtype=np.float64)
    if smoothing:
        grid = S.grid if isinstance(S, DenseScoreMap) else grid
        values = smooth_scores(torch.as_tensor(values)[None], grid, smoothing)[0].numpy()
    labels = np.argmax(values, axis=-1)
    return DenseTargetMap(labels.astype(np.int64), np.ones(labels.shape, dtype=bool))


def dense_alignment_loss(S_hat, target, temperature=0.07):
    """Mean cross-entropy of ``softmax(S_hat / temperature)`` against target labels
    over valid pixels. ``S_hat`` may be a :class:`DenseScoreMap` or a tensor
    whose last axis is the class axis."""
    check_positive("temperature", temperature)
    logits = S_hat.values if isinstance(S_hat, DenseScoreMap) else S_hat
    labels = torch.as_tensor(target.labels, dtype=torch.long)
    valid = torch.as_tensor(target.valid_mask, dtype=torch.bool)
    if logits.shape[:-1] != labels.shape:
        raise InputError(f"score map {tuple(logits.shape)} and target {tuple(labels.shape)} disagree")
    if not valid.any():
        raise InputError("no valid pixel in target map")
    if target.probs is not None:
        probs = torch.as_tensor(target.probs, dtype=logits.dtype)
        return F_.cross_entropy(logits[valid] / temperature, probs[valid])
    return F_.cross_entropy(logits[valid] / temperature, labels[valid])


@dataclass
class AdaptConfig:
    epochs: int = 5
    lr_text: float = 1e-1
    lr_visual: float = 1e-5
    batch_size: int = 16
    temperature: float = 0.07
    layout: tuple = (4, 4)
    mode: str = "both"
    hand_template: str = "a photo of a {}"
    recurrence: str = "bilstm"
    use_lstm: bool = True
    use_mlp: bool = True
    text_init: str = "template"
    target_smoothing: int = 0
    target_confidence: float = 0.0
    soft_targets: bool = False
    schedule: str = "constant"
    eval_delta: float = 0.6
    seed: int = 0

    def validate(self):
        check_positive("lr_text", self.lr_text)
        check_positive("lr_visual", self.lr_visual)
        check_positive("temperature", self.temperature)
        if self.mode not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation mode {self.mode!r}; one of {ABLATION_MODES}")
        if self.text_init not in ("template", "random"):
            raise ConfigurationError(f"unknown text_init {self.text_init!r}; one of template, random")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; one of constant, cosine")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        return self


@dataclass
class AdaptReport:
    mode: str
    records: list = field(default_factory=list)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def template_context(encoders, template, layout):
    """Token embeddings of the template words around ``{}``, one per prompt slot.

    When the template's word counts do not fit the layout, every slot gets
    the mean context embedding instead.
    """
    before, _, after = template.partition("{}")
    tok, te = encoders.tokenizer, encoders.text_encoder
    words_before, words_after = tok.encode(before), tok.encode(after)
    front, total = layout
    with torch.no_grad():
        if len(words_before) == front and len(words_after) == total - front:
            return te.embed_tokens(words_before + words_after).detach().clone()
        ctx = te.embed_tokens(words_before + words_after)
        return ctx.mean(dim=0, keepdim=True).expand(total, -1).detach().clone()


def make_prompts(encoders, cfg):
    """Fresh prompt modules for an ablation mode (``None`` where disabled)."""
    tp = vp = None
    if cfg.mode in ("text", "both"):
        tp = TextPrompt(encoders.text_encoder.token_dim, cfg.layout, recurrence=cfg.recurrence,
                        use_lstm=cfg.use_lstm, use_mlp=cfg.use_mlp, seed=cfg.seed)
        if cfg.text_init == "template" and tp.n_prompts:
            torch.manual_seed(derive_seed(cfg.seed, "text-warm-start") % (2 ** 31))
            err = tp.warm_start(template_context(encoders, cfg.hand_template, tp.layout))
            log.info("text prompt warm start mse %.3g", err)
    if cfg.mode in ("visual", "both"):
        vp = VisualPrompt(encoders.dim, seed=cfg.seed)
    return tp, vp


class PromptedModel:
    """Frozen encoders plus optional text/visual prompts."""

    def __init__(self, encoders, text_prompt=None, visual_prompt=None, hand_template=None):
        self.encoders = encoders
        self.text_prompt = text_prompt
        self.visual_prompt = visual_prompt
        self.hand_template = hand_template

    def plain_embeddings(self, names, normalize=None):
        return class_embeddings(self.encoders, names, normalize=normalize)

    def prompted_embeddings(self, names, normalize=None):
        if self.text_prompt is not None:
            tok = self.encoders.tokenizer
            return prompted_class_embeddings(self.text_prompt, self.encoders,
                                             [tok.category_tokens(n) for n in names], names,
                                             normalize=normalize)
        if self.hand_template:
            return class_embeddings(self.encoders, names, self.hand_template, normalize=normalize)
        return self.plain_embeddings(names, normalize)

    def features(self, images):
        """Raw (unnormalised) dense features."""
        with torch.no_grad():
            return encode_images_dense(self.encoders, images)

    def scores_from_features(self, feats, names):
        """Score map from raw features; the visual prompt attends over raw
        embeddings, normalisation (if enabled) is applied just before the
        inner product."""
        keys = self.prompted_embeddings(names, normalize=False).values
        if self.visual_prompt is not None:
            feats = self.visual_prompt(feats, keys, self.plain_embeddings(names, normalize=False).values)
        if self.encoders.normalize:
            feats, keys = normalize_rows(feats), normalize_rows(keys)
        return feats @ keys.T

    def score_maps(self, images, names, batch_size=64):
        out, grid = [], None
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                feats, grid = self.features(images[start:start + batch_size])
                out.append(self.scores_from_features(feats, names))
        return torch.cat(out).numpy().astype(np.float64), grid


def dense_ground_truth(annotations, stride):
    return np.stack([downsample_mask(a.dense_mask, stride).ravel() for a in annotations])


def dense_miou(model, images, annotations, categories, delta=0.6):
    """Argmax and delta-thresholded mIoU on novel and base classes."""
    scores, _ = model.score_maps(images, categories.names)
    gt = dense_ground_truth(annotations, model.encoders.stride)
    pred = scores.argmax(axis=-1)
    thr = threshold_predictions(scores, delta)
    return {"miou_novel": mean_iou_dense(pred, gt, categories.novel_indices),
            "miou_base": mean_iou_dense(pred, gt, categories.base_indices),
            "miou_novel_thresholded": mean_iou_dense(thr, gt, categories.novel_indices),
            "miou_base_thresholded": mean_iou_dense(thr, gt, categories.base_indices)}


def run_adapt(encoders, text_prompt, visual_prompt, train_images, categories, cfg,
              val_images=None, val_annotations=None):
    """Optimise the prompts on ``train_images`` with frozen-teacher targets.

    Returns ``(text_prompt, visual_prompt, AdaptReport)``. Encoder weights are
    never updated.
    """
    cfg.validate()
    if not encoders.frozen:
        raise ConfigurationError("encoders must be frozen before adaptation")
    names = categories.names
    hand = cfg.hand_template if cfg.mode == "hand" else None
    model = PromptedModel(encoders, text_prompt, visual_prompt, hand)
    teacher = PromptedModel(encoders)

    feats_all, targets, valid = [], [], []
    with torch.no_grad():
        for start in range(0, len(train_images), 64):
            feats, grid = teacher.features(train_images[start:start + 64])
            feats_all.append(feats)
            scores = smooth_scores(teacher.scores_from_features(feats, names), grid, cfg.target_smoothing)
            valid.append(torch.softmax(scores / cfg.temperature, dim=-1).max(dim=-1).values
                         >= cfg.target_confidence)
            targets.append(torch.softmax(scores / cfg.temperature, dim=-1) if cfg.soft_targets
                           else scores.argmax(dim=-1))
    feats_all = torch.cat(feats_all) if feats_all else torch.zeros(0)
    targets = torch.cat(targets) if targets else torch.zeros(0, dtype=torch.long)
    valid = torch.cat(valid).numpy() if valid else np.zeros(0, dtype=bool)

    groups = []
    if text_prompt is not None:
        groups.append({"params": list(text_prompt.parameters()), "lr": cfg.lr_text})
    if visual_prompt is not None:
        groups.append({"params": list(visual_prompt.parameters()), "lr": cfg.lr_visual})
    opt = torch.optim.SGD(groups) if groups else None
    n = len(train_images)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    sched = None
    if opt is not None and cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, cfg.epochs * steps_per_epoch))

    report = AdaptReport(cfg.mode)
    rng = np.random.default_rng(derive_seed(cfg.seed, "adapt-order"))
    for epoch in range(cfg.epochs if opt else 0):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            s_hat = model.scores_from_features(feats_all[idx], names)
            t = targets[idx]
            v = valid[idx.numpy()]
            if not v.any():
                continue
            if cfg.soft_targets:
                tgt = DenseTargetMap(t.argmax(-1).numpy(), v, t)
            else:
                tgt = DenseTargetMap(t.numpy(), v)
            loss = dense_alignment_loss(s_hat, tgt, cfg.temperature)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("adapt", f"epoch{epoch}/batch{b}", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        rec = {"epoch": epoch, "loss": total / count, "ablation_mode": cfg.mode}
        if val_images is not None:
            rec.update(dense_miou(model, val_images, val_annotations, categories, cfg.eval_delta))
        report.records.append(rec)
        log.info("adapt[%s] epoch %d %s", cfg.mode, epoch, rec)
    if not report.records and val_images is not None:
        rec = {"epoch": -1, "loss": float("nan"), "ablation_mode": cfg.mode}
        rec.update(dense_miou(model, val_images, val_annotations, categories, cfg.eval_delta))
        report.records.append(rec)
    return text_prompt, visual_prompt, report


class PromptAdapter(BaseEstimator):
    """``fit`` runs the adapting stage; ``transform`` returns prompted score maps."""

    def __init__(self, mode="both", epochs=5, lr_text=1e-1, lr_visual=1e-5, batch_size=16,
                 temperature=0.07, layout=(4, 4), hand_template="a photo of a {}",
                 recurrence="bilstm", use_lstm=True, use_mlp=True, text_init="template", target_smoothing=0,
                 target_confidence=0.0, soft_targets=False, schedule="constant", eval_delta=0.6, seed=0):
        self.mode = mode
        self.epochs = epochs
        self.lr_text = lr_text
        self.lr_visual = lr_visual
        self.batch_size = batch_size
        self.temperature = temperature
        self.layout = layout
        self.hand_template = hand_template
        self.recurrence = recurrence
        self.use_lstm = use_lstm
        self.use_mlp = use_mlp
        self.text_init = text_init
        self.target_smoothing = target_smoothing
        self.target_confidence = target_confidence
        self.soft_targets = soft_targets
        self.schedule = schedule
        self.eval_delta = eval_delta
        self.seed = seed

    def config(self):
        return AdaptConfig(**{k: v for k, v in self.get_params().items()})

    def fit(self, encoders, train_images, categories, val_images=None, val_annotations=None):
        cfg = self.config().validate()
        tp, vp = make_prompts(encoders, cfg)
        tp, vp, report = run_adapt(encoders, tp, vp, train_images, categories, cfg,
                                   val_images, val_annotations)
        self.encoders_ = encoders
        self.text_prompt_ = tp
        self.visual_prompt_ = vp
        self.report_ = report
        self.categories_ = categories
        return self

    @property
    def model_(self):
        check_is_fitted(self, "encoders_")
        hand = self.hand_template if self.mode == "hand" else None
        return PromptedModel(self.encoders_, self.text_prompt_, self.visual_prompt_, hand)

    def transform(self, images, names=None):
        scores, _ = self.model_.score_maps(images, names or self.categories_.names)
        return scores

    def save(self, path):
        check_is_fitted(self, "encoders_")
        meta = {"config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}}
        if self.text_prompt_ is not None:
            tp = self.text_prompt_
            meta["text"] = {"token_dim": tp.token_dim, "layout": list(tp.layout),
                            "mlp_hidden": tp.mlp[0].out_features, "recurrence": tp.recurrence,
                            "use_lstm": tp.use_lstm, "use_mlp": tp.use_mlp}
        if self.visual_prompt_ is not None:
            meta["visual"] = {"dim": self.visual_prompt_.dim, "activation": self.visual_prompt_.activation}
        save_prompts(path, self.text_prompt_, self.visual_prompt_, meta)
