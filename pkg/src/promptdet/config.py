"""Flat ``section.key=value`` configuration with typed defaults.

Values resolve as command line > config file > built-in default. Lines
starting with ``#`` and blank lines are ignored.
"""

import hashlib
import json
from pathlib import Path

from .exceptions import ConfigurationError

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "data.n_train": 400,
    "data.n_val": 100,
    "data.n_pretrain": 2000,
    "data.n_transfer": 20,
    "pretrain.epochs": 40,
    "pretrain.batch_size": 32,
    "pretrain.lr": 3e-3,
    "pretrain.temperature": 0.07,
    "adapt.epochs": 20,
    "adapt.lr_text": 1e-1,
    "adapt.lr_visual": 1e-2,
    "adapt.batch_size": 16,
    "adapt.temperature": 0.07,
    "adapt.layout": (4, 4),
    "adapt.hand_template": "a photo of a {}",
    "adapt.recurrence": "bilstm",
    "adapt.use_lstm": True,
    "adapt.use_mlp": True,
    "adapt.text_init": "template",
    "adapt.target_smoothing": 0,
    "adapt.target_confidence": 0.0,
    "adapt.soft_targets": False,
    "adapt.schedule": "cosine",
    "adapt.eval_delta": 0.6,
    "rpn.epochs": 12,
    "rpn.batch_size": 16,
    "rpn.lr": 3e-3,
    "rpn.top_k": 20,
    "label.prompts": "both",
    "label.delta": 0.6,
    "label.gamma": 0.4,
    "label.objectness": 0.98,
    "label.normalization": "minmax",
    "label.connectivity": 4,
    "label.oracle_proposals": False,
    "label.oracle_jitter": 1.0,
    "detector.epochs": 10,
    "detector.batch_size": 16,
    "detector.lr": 1e-3,
    "detector.optimizer": "adam",
    "detector.temperature": 0.07,
    "detector.classifier": "prompted",
    "eval.score_thresh": 0.05,
    "eval.nms_iou": 0.5,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key, raw):
    """Convert a string to the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"bad value {raw!r} for {key}") from None
    return text


def parse_config_text(text):
    """``{key: typed value}`` from flat ``key=value`` lines."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = coerce(key, value)
    return out


def load_config_file(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


def resolve(file_values=None, cli_values=None):
    """Defaults overlaid by the config file, then by command-line values."""
    cfg = dict(DEFAULTS)
    for layer in (file_values or {}, cli_values or {}):
        for key, value in layer.items():
            cfg[key] = coerce(key, value)
    return cfg


def section(cfg, name):
    """Keys of one section with the prefix stripped."""
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def config_hash(cfg, keys=None):
    """sha256 of the JSON encoding of ``cfg`` (restricted to ``keys``)."""
    items = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items() if keys is None or k in keys}
    return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()


def dump(cfg):
    return "".join(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}\n" for k, v in sorted(cfg.items()))
