"""Miniature open-vocabulary detection benchmark.

Scenes are coloured geometric shapes on a textured grey background. A
category is a ``(color, shape)`` pair named ``"<color>-<shape>"``, so
novel categories share their colour and shape with some base categories.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binio
from .exceptions import ConfigurationError
from .validation import derive_seed

BACKGROUND = 65535

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.92, 0.85, 0.15),
    "cyan": (0.10, 0.85, 0.85),
}
SHAPES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class CategorySet:
    names: tuple
    base_flags: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "base_flags", tuple(bool(b) for b in self.base_flags))
        if len(self.names) == 0:
            raise ConfigurationError("category set is empty")
        if len(self.names) != len(self.base_flags):
            raise ConfigurationError("names and base_flags differ in length")
        if len(set(self.names)) != len(self.names) or any(not n for n in self.names):
            raise ConfigurationError("category names must be unique and non-empty")

    def __len__(self):
        return len(self.names)

    @property
    def index(self):
        return {n: i for i, n in enumerate(self.names)}

    @property
    def base_indices(self):
        return [i for i, b in enumerate(self.base_flags) if b]

    @property
    def novel_indices(self):
        return [i for i, b in enumerate(self.base_flags) if not b]

    def validate_split(self):
        """Require at least one base and one non-base category."""
        if not self.base_indices or not self.novel_indices:
            raise ConfigurationError("need at least one base and one novel category")
        return self

    def to_json(self):
        return [{"name": n, "is_base": b} for n, b in zip(self.names, self.base_flags)]

    @classmethod
    def from_json(cls, items):
        return cls([d["name"] for d in items], [d["is_base"] for d in items])


def split_name(name):
    """``"red-circle"`` -> ``("red", "circle")``."""
    color, _, shape = name.partition("-")
    return color, shape


# Latin-square style split over 5 colours x 4 shapes: every colour and every
# shape occurs among the base pairs; 4 pairs are novel and 4 further pairs are
# never used by the reference set (they form the transfer set).
_NOVEL_PAIRS = [("red", "circle"), ("green", "square"), ("blue", "triangle"), ("yellow", "cross")]
_TRANSFER_PAIRS = [("green", "cross"), ("blue", "circle"), ("yellow", "square"), ("cyan", "triangle")]


def reference_categories():
    names, flags = [], []
    for color in COLORS:
        for shape in SHAPES:
            if (color, shape) in _TRANSFER_PAIRS:
                continue
            names.append(f"{color}-{shape}")
            flags.append((color, shape) not in _NOVEL_PAIRS)
    return CategorySet(names, flags)


def transfer_categories():
    """Categories disjoint from :func:`reference_categories` (all unseen)."""
    names = [f"{c}-{s}" for c, s in _TRANSFER_PAIRS]
    return CategorySet(names, [False] * len(names))


@dataclass(frozen=True)
class DatasetConfig:
    categories: CategorySet = field(default_factory=reference_categories)
    height: int = 48
    width: int = 48
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 20
    max_overlap: float = 0.15
    color_jitter: float = 0.06
    noise: float = 0.03

    def validate(self):
        if len(self.categories) == 0:
            raise ConfigurationError("zero categories")
        if self.height <= 0 or self.width <= 0:
            raise ConfigurationError("zero image area")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 0 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ConfigurationError("object size range does not fit the image")
        for name in self.categories.names:
            color, shape = split_name(name)
            if color not in COLORS or shape not in SHAPES:
                raise ConfigurationError(f"unknown colour/shape in category {name!r}")
        return self

    def to_json(self):
        return {
            "categories": self.categories.to_json(),
            "height": self.height, "width": self.width,
            "min_objects": self.min_objects, "max_objects": self.max_objects,
            "min_size": self.min_size, "max_size": self.max_size,
            "max_overlap": self.max_overlap, "color_jitter": self.color_jitter,
            "noise": self.noise,
        }

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["categories"] = CategorySet.from_json(d["categories"])
        return cls(**d)


@dataclass
class SceneImage:
    image_id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]


@dataclass
class SceneAnnotation:
    image_id: str
    boxes: np.ndarray  # N x 4 int64, half-open (x1, y1, x2, y2)
    class_ids: np.ndarray  # N int64
    dense_mask: np.ndarray  # H x W int64, BACKGROUND where empty

    def __eq__(self, other):
        return (isinstance(other, SceneAnnotation) and self.image_id == other.image_id
                and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.class_ids, other.class_ids)
                and np.array_equal(self.dense_mask, other.dense_mask))

    def restrict(self, keep_classes):
        """Copy keeping only boxes/mask pixels whose class is in ``keep_classes``."""
        keep_classes = np.asarray(sorted(keep_classes), dtype=np.int64)
        sel = np.isin(self.class_ids, keep_classes)
        mask = np.where(np.isin(self.dense_mask, keep_classes), self.dense_mask, BACKGROUND)
        return SceneAnnotation(self.image_id, self.boxes[sel].copy(), self.class_ids[sel].copy(), mask)


def shape_mask(shape, w, h):
    """Boolean h x w raster of ``shape`` filling its box."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if shape == "circle":
        return ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "triangle":
        # apex at the top centre, base along the bottom row
        half = (yy + 1) / h * (w / 2.0)
        return np.abs(xx - cx) <= half
    if shape == "cross":
        tw, th = max(1, round(w / 3)), max(1, round(h / 3))
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m = np.zeros((h, w), dtype=bool)
        m[:, x0:x0 + tw] = True
        m[y0:y0 + th, :] = True
        return m
    raise ConfigurationError(f"unknown shape {shape!r}")


def _background(rng, h, w, noise):
    level = rng.uniform(0.35, 0.6)
    coarse = rng.normal(0.0, 0.06, size=(h // 8 + 2, w // 8 + 2, 1))
    smooth = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w]
    tint = rng.normal(0.0, 0.02, size=3)
    img = level + smooth + tint + rng.normal(0.0, noise, size=(h, w, 3))
    return img


def _overlap_ok(box, placed, max_overlap):
    x1, y1, x2, y2 = box
    area = (x2 - x1) * (y2 - y1)
    for (a1, b1, a2, b2) in placed:
        iw = min(x2, a2) - max(x1, a1)
        ih = min(y2, b2) - max(y1, b1)
        if iw > 0 and ih > 0:
            smaller = min(area, (a2 - a1) * (b2 - b1))
            if iw * ih > max_overlap * smaller:
                return False
    return True


def generate_scene(config, seed, image_id="scene", class_pool=None):
    """Render one scene. Deterministic in ``(config, seed, image_id)``.

    ``class_pool`` optionally restricts which category indices are drawn.
    """
    config.validate()
    rng = np.random.default_rng(derive_seed(seed, "scene", image_id))
    h, w = config.height, config.width
    pool = np.arange(len(config.categories)) if class_pool is None else np.asarray(class_pool)
    img = _background(rng, h, w, config.noise)
    mask = np.full((h, w), BACKGROUND, dtype=np.int64)
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes, classes, rasters = [], [], []
    for _ in range(n_obj):
        cls = int(pool[rng.integers(len(pool))])
        color, shape = split_name(config.categories.names[cls])
        for _attempt in range(200):
            bw = int(rng.integers(config.min_size, config.max_size + 1))
            bh = int(np.clip(round(bw * rng.uniform(0.8, 1.25)), config.min_size, min(config.max_size, h)))
            x1 = int(rng.integers(0, w - bw + 1))
            y1 = int(rng.integers(0, h - bh + 1))
            box = (x1, y1, x1 + bw, y1 + bh)
            if _overlap_ok(box, boxes, config.max_overlap):
                break
        else:
            raise ConfigurationError("could not place objects; scene too crowded")
        raster = shape_mask(shape, bw, bh)
        rgb = np.asarray(COLORS[color]) + rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        region = img[y1:y1 + bh, x1:x1 + bw]
        shade = rgb + rng.normal(0.0, config.noise, size=(bh, bw, 3))
        region[raster] = shade[raster]
        mask[y1:y1 + bh, x1:x1 + bw][raster] = cls
        boxes.append(box)
        classes.append(cls)
        rasters.append(raster)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    ann = SceneAnnotation(image_id, np.asarray(boxes, dtype=np.int64).reshape(-1, 4),
                          np.asarray(classes, dtype=np.int64), mask)
    for box, cls in zip(ann.boxes, ann.class_ids):
        x1, y1, x2, y2 = box
        if not np.any(ann.dense_mask[y1:y2, x1:x2] == cls):
            raise ConfigurationError(f"object of class {cls} fully occluded in {image_id}")
    return SceneImage(image_id, img), ann


# ---------------------------------------------------------------- dataset IO

SPLITS = ("train", "val", "train_sealed", "pretrain")
CAPTION_TEMPLATE = "a photo of a {}"


def dominant_class(annotation, allowed=None):
    """Class with the most mask pixels (restricted to ``allowed``), or -1."""
    ids, counts = np.unique(annotation.dense_mask, return_counts=True)
    best, best_n = -1, 0
    for i, n in zip(ids, counts):
        if int(i) != BACKGROUND and (allowed is None or int(i) in allowed) and n > best_n:
            best, best_n = int(i), int(n)
    return best


def caption_for(annotation, categories, template=CAPTION_TEMPLATE):
    """Templated caption naming the dominant object, or ``None`` for an empty scene."""
    c = dominant_class(annotation)
    return None if c < 0 else template.format(" ".join(split_name(categories.names[c])))


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    config: DatasetConfig
    files: dict  # relative path -> sha256
    checksum: str

    @property
    def categories(self):
        return self.config.categories

    def split_dir(self, split):
        return Path(self.root) / split

    def to_json(self):
        return {"seed": self.seed, "config": self.config.to_json(),
                "files": self.files, "checksum": self.checksum}

    @classmethod
    def load(cls, root):
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text())
        return cls(root, d["seed"], DatasetConfig.from_json(d["config"]), d["files"], d["checksum"])


def annotation_document(categories, scenes, mask_dir="masks", image_dir="images"):
    images, annotations = [], []
    for img, ann in scenes:
        h, w = ann.dense_mask.shape
        images.append({"id": ann.image_id, "file": f"{image_dir}/{ann.image_id}.p3img",
                       "mask": f"{mask_dir}/{ann.image_id}.p3mask", "height": h, "width": w})
        for box, cls in zip(ann.boxes, ann.class_ids):
            annotations.append({"image_id": ann.image_id, "bbox": [int(v) for v in box],
                                "category_index": int(cls)})
    return {"categories": categories.to_json(), "images": images, "annotations": annotations}


def _write_split(root, split, categories, scenes, image_dir):
    split_dir = root / split
    (split_dir / "masks").mkdir(parents=True, exist_ok=True)
    for img, ann in scenes:
        if img is not None:
            binio.write_image(root / image_dir / f"{ann.image_id}.p3img", img.pixels)
        binio.write_mask(split_dir / "masks" / f"{ann.image_id}.p3mask", ann.dense_mask)
    rel_image_dir = "images" if image_dir == f"{split}/images" else f"../{image_dir}"
    doc = annotation_document(categories, scenes, image_dir=rel_image_dir)
    (split_dir / "annotations.json").write_text(json.dumps(doc, indent=1))


def _write_captions(root, pairs):
    (root / "pretrain" / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for img, caption in pairs:
        binio.write_image(root / "pretrain" / "images" / f"{img.image_id}.p3img", img.pixels)
        entries.append({"id": img.image_id, "file": f"images/{img.image_id}.p3img", "caption": caption})
    (root / "pretrain" / "captions.json").write_text(json.dumps({"images": entries}, indent=1))


def generate_dataset(config, n_train, n_val, seed, out_dir, n_pretrain=0, n_transfer=0,
                     transfer_set=None):
    """Write a train/val benchmark under ``out_dir`` and return its manifest.

    The ``train`` split keeps base boxes only and blanks novel pixels in its
    masks; the full train annotation lives in ``train_sealed`` for evaluation.
    ``n_pretrain`` > 0 also writes a ``pretrain`` image/caption corpus whose
    captions may name any category (boxes and masks are not stored).
    ``n_transfer`` > 0 writes a ``transfer`` split drawn only from
    ``transfer_set`` (default :func:`transfer_categories`), which must be
    disjoint from the main category set.
    """
    if n_train < 1 or n_val < 1:
        raise ConfigurationError("n_train and n_val must be >= 1")
    if n_pretrain < 0 or n_transfer < 0:
        raise ConfigurationError("n_pretrain and n_transfer must be >= 0")
    config.validate()
    config.categories.validate_split()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for sub in ("train/images", "val/images"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    base = config.categories.base_indices
    train = [generate_scene(config, seed, f"train_{i:05d}") for i in range(n_train)]
    val = [generate_scene(config, seed, f"val_{i:05d}") for i in range(n_val)]
    _write_split(root, "train", config.categories,
                 [(img, ann.restrict(base)) for img, ann in train], "train/images")
    _write_split(root, "train_sealed", config.categories,
                 [(None, ann) for _, ann in train], "train/images")
    _write_split(root, "val", config.categories, val, "val/images")
    if n_pretrain:
        pairs = []
        for i in range(n_pretrain):
            img, ann = generate_scene(config, seed, f"pretrain_{i:05d}")
            caption = caption_for(ann, config.categories)
            if caption is not None:
                pairs.append((img, caption))
        _write_captions(root, pairs)
    if n_transfer:
        tset = transfer_set or transfer_categories()
        if set(tset.names) & set(config.categories.names):
            raise ConfigurationError("transfer categories overlap the main category set")
        tconfig = replace(config, categories=tset)
        (root / "transfer" / "images").mkdir(parents=True, exist_ok=True)
        scenes = [generate_scene(tconfig, seed, f"transfer_{i:05d}") for i in range(n_transfer)]
        _write_split(root, "transfer", tset, scenes, "transfer/images")

    files = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json"):
        files[path.relative_to(root).as_posix()] = binio.file_sha256(path)
    checksum = binio.array_sha256(np.frombuffer(json.dumps(files, sort_keys=True).encode(), dtype=np.uint8))
    manifest = DatasetManifest(root, int(seed), config, files, checksum)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    return manifest


def read_annotations(path):
    """Parse an annotation document back into ``(categories, [SceneAnnotation])``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    categories = CategorySet.from_json(doc["categories"])
    by_image = {}
    for a in doc["annotations"]:
        by_image.setdefault(a["image_id"], []).append(a)
    anns = []
    for im in doc["images"]:
        mask = binio.read_mask(path.parent / im["mask"])
        items = by_image.get(im["id"], [])
        boxes = np.asarray([a["bbox"] for a in items], dtype=np.int64).reshape(-1, 4)
        classes = np.asarray([a["category_index"] for a in items], dtype=np.int64)
        anns.append(SceneAnnotation(im["id"], boxes, classes, mask))
    return categories, anns


def load_captions(root):
    """Return ``(images, captions)`` of the ``pretrain`` corpus."""
    path = Path(root) / "pretrain" / "captions.json"
    if not path.exists():
        raise FileNotFoundError(path)
    doc = json.loads(path.read_text())
    images = [SceneImage(e["id"], binio.read_image(path.parent / e["file"])) for e in doc["images"]]
    return images, [e["caption"] for e in doc["images"]]


def load_split(root, split):
    """Return ``(categories, images, annotations)`` for a dataset split."""
    root = Path(root)
    path = root / split / "annotations.json"
    if not path.exists():
        raise FileNotFoundError(path)
    categories, anns = read_annotations(path)
    doc = json.loads(path.read_text())
    images = [SceneImage(im["id"], binio.read_image(path.parent / im["file"])) for im in doc["images"]]
    return categories, images, anns
