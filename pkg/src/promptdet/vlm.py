"""Toy vision-language model: dense image encoder, bag-of-tokens text encoder,
global contrastive pretraining and the dense pixel/category score map."""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F_
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import binio
from .exceptions import InputError, ShapeError, TrainingDivergenceError
from .synthdata import COLORS, SHAPES, dominant_class, split_name
from .validation import derive_seed, state_hash

log = logging.getLogger(__name__)

VOCAB = ("<pad>", "a", "photo", "of", "the", "shape", "object") + tuple(COLORS) + SHAPES
TEMPLATE = "a photo of a {}"


class Tokenizer:
    """Whitespace/hyphen tokenizer over a fixed vocabulary."""

    def __init__(self, vocab=VOCAB):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self):
        return len(self.vocab)

    def encode(self, text):
        words = text.replace("-", " ").split()
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise InputError(f"out-of-vocabulary word {exc.args[0]!r}") from None

    def category_tokens(self, name):
        return self.encode(name)

    def template_tokens(self, name, template=TEMPLATE):
        return self.encode(template.format(" ".join(split_name(name))))


class ImageEncoder(torch.nn.Module):
    """Conv stack ending in a 1x1 projection to the embedding width.

    There is no global pooling: the output is one embedding per grid cell.
    """

    def __init__(self, dim=32, channels=(16, 32), kernel=7, bias=True):
        super().__init__()
        layers = []
        c_in = 3
        for c in channels:
            layers.append(torch.nn.Conv2d(c_in, c, kernel, stride=2, padding=kernel // 2, bias=bias))
            c_in = c
        self.convs = torch.nn.ModuleList(layers)
        self.proj = torch.nn.Conv2d(c_in, dim, 1, bias=bias)
        self.stride = 2 ** len(channels)
        self.dim = dim

    def forward(self, x):
        for conv in self.convs:
            x = F_.relu(conv(x))
        return self.proj(x)


class TextEncoder(torch.nn.Module):
    """Token embedding table, mean pooling over the sequence, one linear layer."""

    def __init__(self, vocab_size, dim=32, token_dim=32):
        super().__init__()
        self.table = torch.nn.Embedding(vocab_size, token_dim)
        self.linear = torch.nn.Linear(token_dim, dim)
        self.token_dim = token_dim
        self.dim = dim

    def embed_tokens(self, tokens):
        return self.table(torch.as_tensor(tokens, dtype=torch.long))

    def pool(self, seq_embeddings):
        """``seq_embeddings``: list of (L_i, token_dim) tensors -> (N, dim)."""
        if len(seq_embeddings) == 0:
            return torch.zeros(0, self.dim, dtype=self.linear.weight.dtype)
        pooled = torch.stack([e.mean(dim=0) for e in seq_embeddings])
        return self.linear(pooled)


@dataclass
class EncoderParams:
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    tokenizer: Tokenizer = field(default_factory=Tokenizer)
    normalize: bool = True
    frozen: bool = False

    @property
    def dim(self):
        return self.image_encoder.dim

    @property
    def stride(self):
        return self.image_encoder.stride

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def parameters(self):
        return list(self.image_encoder.parameters()) + list(self.text_encoder.parameters())

    def state_hash(self):
        return state_hash({**{f"image.{k}": v for k, v in self.image_encoder.state_dict().items()},
                           **{f"text.{k}": v for k, v in self.text_encoder.state_dict().items()}})

    def to(self, dtype):
        self.image_encoder.to(dtype)
        self.text_encoder.to(dtype)
        return self

    def tensors(self, prefix="vlm."):
        out = {}
        for name, mod in (("image", self.image_encoder), ("text", self.text_encoder)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}{name}.{k}"] = v.detach().cpu().numpy()
        return out

    def meta(self):
        ie = self.image_encoder
        return {"dim": ie.dim, "channels": [c.out_channels for c in ie.convs],
                "kernel": ie.convs[0].kernel_size[0] if ie.convs else 1,
                "bias": ie.proj.bias is not None, "token_dim": self.text_encoder.token_dim,
                "vocab": list(self.tokenizer.vocab), "normalize": self.normalize,
                "frozen": self.frozen}

    def save(self, path):
        binio.write_checkpoint(path, self.tensors(), {"vlm": self.meta()})

    @classmethod
    def load(cls, path, prefix="vlm."):
        tensors, meta = binio.read_checkpoint(path)
        return cls.from_tensors(tensors, meta["vlm"], prefix)

    @classmethod
    def from_tensors(cls, tensors, meta, prefix="vlm."):
        tok = Tokenizer(meta["vocab"])
        params = init_encoders(dim=meta["dim"], channels=tuple(meta["channels"]), kernel=meta["kernel"],
                               bias=meta["bias"], token_dim=meta["token_dim"], tokenizer=tok, seed=0)
        for name, mod in (("image", params.image_encoder), ("text", params.text_encoder)):
            sd = {k[len(f"{prefix}{name}."):]: torch.from_numpy(v.copy()) for k, v in tensors.items()
                  if k.startswith(f"{prefix}{name}.")}
            mod.load_state_dict(sd)
        params.normalize = meta["normalize"]
        if meta["frozen"]:
            params.freeze()
        return params


def init_encoders(dim=32, channels=(16, 32), kernel=7, bias=True, token_dim=32, tokenizer=None, seed=0):
    tokenizer = tokenizer or Tokenizer()
    torch.manual_seed(derive_seed(seed, "init-encoders") % (2 ** 31))
    return EncoderParams(ImageEncoder(dim, channels, kernel, bias),
                         TextEncoder(len(tokenizer), dim, token_dim), tokenizer)


# ------------------------------------------------------------- dense types

@dataclass
class DenseFeatureMap:
    values: torch.Tensor  # (H'W', D)
    grid: tuple
    stride: int

    def __post_init__(self):
        if self.values.shape[0] != self.grid[0] * self.grid[1]:
            raise ShapeError(f"{self.values.shape[0]} rows for grid {self.grid}")

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class ClassEmbeddings:
    values: torch.Tensor  # (|C|, D)
    names: tuple = ()
    normalized: bool = True

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class DenseScoreMap:
    values: torch.Tensor  # (H'W', |C|)
    grid: tuple
    names: tuple = ()

    def column(self, c):
        return self.values[:, c]

    def numpy(self):
        return self.values.detach().cpu().numpy().astype(np.float64)


def _image_batch(images, dtype):
    arrs = [im.pixels if hasattr(im, "pixels") else im for im in images]
    x = torch.as_tensor(np.stack(arrs), dtype=dtype).permute(0, 3, 1, 2)
    return x - 0.5


def encode_images_dense(params, images):
    """Batched dense encoding; returns a (B, H'W', D) tensor and the grid."""
    enc = params.image_encoder
    dtype = enc.proj.weight.dtype
    x = _image_batch(images, dtype)
    h, w = x.shape[2:]
    if h % enc.stride or w % enc.stride:
        raise ShapeError(f"image {h}x{w} not divisible by stride {enc.stride}")
    out = enc(x)
    b, d, gh, gw = out.shape
    return out.permute(0, 2, 3, 1).reshape(b, gh * gw, d), (gh, gw)


def encode_image_dense(params, image):
    with torch.set_grad_enabled(not params.frozen):
        values, grid = encode_images_dense(params, [image])
    return DenseFeatureMap(values[0], grid, params.stride)


def encode_text(params, token_sequences, normalize=None):
    """Embed token-index sequences; one row per sequence."""
    normalize = params.normalize if normalize is None else normalize
    vocab = len(params.tokenizer)
    for seq in token_sequences:
        if any(t < 0 or t >= vocab for t in seq):
            raise InputError(f"token index outside vocabulary of size {vocab}: {list(seq)}")
    te = params.text_encoder
    emb = te.pool([te.embed_tokens(seq) for seq in token_sequences])
    if normalize and len(token_sequences):
        emb = F_.normalize(emb, dim=-1)
    return ClassEmbeddings(emb, normalized=normalize)


def class_embeddings(params, names, template=None, normalize=None):
    """Text embeddings of category names, bare or wrapped in ``template``."""
    tok = params.tokenizer
    seqs = [tok.template_tokens(n, template) if template else tok.category_tokens(n) for n in names]
    emb = encode_text(params, seqs, normalize)
    emb.names = tuple(names)
    return emb


def normalize_rows(x):
    return F_.normalize(x, dim=-1)


def dense_score_map(F, T):
    """Inner product of every pixel embedding with every class embedding."""
    if F.dim != T.dim:
        raise ShapeError(f"feature width {F.dim} != text width {T.dim}")
    return DenseScoreMap(F.values @ T.values.T, F.grid, tuple(T.names))


def score_maps(params, images, names, template=None):
    """Frozen-model score maps for a batch: (B, H'W', |C|) with normalised operands."""
    with torch.no_grad():
        feats, grid = encode_images_dense(params, images)
        T = class_embeddings(params, names, template).values
        if params.normalize:
            feats = normalize_rows(feats)
        return feats @ T.T, grid


# ------------------------------------------------------------ pretraining

@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-3
    temperature: float = 0.07
    template: str = TEMPLATE
    seed: int = 0


def dominant_categories(annotations, allowed):
    """Per annotation, the allowed category with the most mask pixels (or -1)."""
    allowed = set(int(c) for c in allowed)
    return np.asarray([dominant_class(a, allowed) for a in annotations], dtype=np.int64)


def captions_from_annotations(annotations, categories, allowed=None, template=TEMPLATE):
    """Caption per scene naming its dominant (allowed) category; ``None`` if there is none."""
    allowed = categories.base_indices if allowed is None else allowed
    out = []
    for c in dominant_categories(annotations, allowed):
        out.append(None if c < 0 else template.format(" ".join(split_name(categories.names[c]))))
    return out


def global_image_embeddings(params, images):
    feats, _ = encode_images_dense(params, images)
    return normalize_rows(feats.mean(dim=1))


def contrastive_loss(img_emb, txt_emb, temperature, labels=None):
    """Symmetric InfoNCE over matched rows.

    With ``labels``, off-diagonal pairs sharing a caption are masked out of
    the negatives (duplicate captions are not false negatives).
    """
    logits = img_emb @ txt_emb.T / temperature
    target = torch.arange(len(img_emb))
    if labels is not None:
        labels = torch.as_tensor(labels)
        dup = (labels[:, None] == labels[None, :]) & ~torch.eye(len(labels), dtype=torch.bool)
        logits = logits.masked_fill(dup, float("-inf"))
    return 0.5 * (F_.cross_entropy(logits, target) + F_.cross_entropy(logits.T, target))


def pretrain_contrastive(images, captions, hyper=None, params=None):
    """Global image/caption contrastive training.

    ``captions[i]`` is the text paired with ``images[i]``; pairs with a
    ``None`` caption are skipped. Returns ``(frozen params, per-epoch losses)``.
    """
    hyper = hyper or PretrainConfig()
    params = params or init_encoders(seed=hyper.seed)
    if len(images) != len(captions):
        raise InputError(f"{len(images)} images but {len(captions)} captions")
    keep = np.asarray([i for i, c in enumerate(captions) if c is not None], dtype=np.int64)
    distinct = sorted({captions[i] for i in keep})
    if len(distinct) < 2:
        raise InputError("pretraining needs at least two distinct captions")
    caption_id = {c: k for k, c in enumerate(distinct)}
    labels = np.full(len(captions), -1, dtype=np.int64)
    labels[keep] = [caption_id[captions[i]] for i in keep]
    tok = params.tokenizer
    tokens = [tok.encode(c) for c in distinct]
    opt = torch.optim.Adam(params.parameters(), lr=hyper.lr)
    rng = np.random.default_rng(derive_seed(hyper.seed, "pretrain-order"))
    losses = []
    for epoch in range(hyper.epochs):
        order = keep[rng.permutation(len(keep))]
        total, n = 0.0, 0
        for b, start in enumerate(range(0, len(order), hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            if len(idx) < 2:
                continue
            img_emb = global_image_embeddings(params, [images[i] for i in idx])
            te = params.text_encoder
            txt = te.pool([te.embed_tokens(tokens[labels[i]]) for i in idx])
            loss = contrastive_loss(img_emb, normalize_rows(txt), hyper.temperature, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("pretrain", f"epoch{epoch}/batch{b}", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        losses.append(total / max(n, 1))
        log.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    params.freeze()
    return params, losses


def retrieval_accuracy(params, images, annotations, categories, template=TEMPLATE):
    """Top-1 accuracy of retrieving the dominant base category among base captions."""
    base = categories.base_indices
    labels = dominant_categories(annotations, base)
    keep = np.flatnonzero(labels >= 0)
    if len(keep) == 0:
        return float("nan")
    with torch.no_grad():
        img = global_image_embeddings(params, [images[i] for i in keep])
        txt = class_embeddings(params, [categories.names[i] for i in base], template).values
        pred = np.asarray(base)[(img @ txt.T).argmax(dim=1).numpy()]
    return float(np.mean(pred == labels[keep]))


class ToyVLM(BaseEstimator):
    """Estimator wrapper around :func:`pretrain_contrastive`.

    ``fit`` pretrains and freezes the encoders; ``transform`` returns dense
    score maps over ``categories`` for a batch of images.
    """

    def __init__(self, dim=32, token_dim=32, channels=(16, 32), kernel=7, epochs=40,
                 batch_size=32, lr=3e-3, temperature=0.07, normalize=True, seed=0):
        self.dim = dim
        self.token_dim = token_dim
        self.channels = channels
        self.kernel = kernel
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.temperature = temperature
        self.normalize = normalize
        self.seed = seed

    def fit(self, images, captions, categories=None):
        """``captions``: one string (or ``None``) per image."""
        params = init_encoders(self.dim, tuple(self.channels), self.kernel, True, self.token_dim,
                               seed=self.seed)
        params.normalize = self.normalize
        hyper = PretrainConfig(self.epochs, self.batch_size, self.lr, self.temperature, seed=self.seed)
        self.params_, self.loss_history_ = pretrain_contrastive(images, captions, hyper, params)
        self.categories_ = categories
        return self

    def transform(self, images, names=None):
        check_is_fitted(self, "params_")
        if names is None:
            if self.categories_ is None:
                raise InputError("no category names given and none recorded at fit time")
            names = self.categories_.names
        values, grid = score_maps(self.params_, images, names)
        return [DenseScoreMap(v, grid, tuple(names)) for v in values]

