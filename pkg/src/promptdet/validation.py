"""Input validation helpers shared by the estimators."""

import hashlib

import numpy as np
import torch

from .exceptions import ConfigurationError, ShapeError


def check_open_unit(name, value):
    """Require ``0 < value < 1``."""
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_unit_interval(name, value, *, allow_above=False):
    """Require ``0 <= value <= 1`` (or any value >= 0 when ``allow_above``)."""
    value = float(value)
    if value < 0.0 or (value > 1.0 and not allow_above):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(name, value):
    value = float(value)
    if not value > 0.0:
        raise ConfigurationError(f"{name} must be positive, got {value}")
    return value


def check_boxes(boxes, height=None, width=None):
    """Return boxes as an (N, 4) float array, checking x1 < x2 and y1 < y2."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) and not (np.all(boxes[:, 0] < boxes[:, 2]) and np.all(boxes[:, 1] < boxes[:, 3])):
        raise ShapeError("boxes must satisfy x1 < x2 and y1 < y2")
    if width is not None and len(boxes):
        if boxes[:, 0].min() < 0 or boxes[:, 2].max() > width:
            raise ShapeError(f"box x-range outside [0, {width}]")
    if height is not None and len(boxes):
        if boxes[:, 1].min() < 0 or boxes[:, 3].max() > height:
            raise ShapeError(f"box y-range outside [0, {height}]")
    return boxes


def check_matrix(name, values, n_cols=None):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {values.shape}")
    if n_cols is not None and values.shape[1] != n_cols:
        raise ShapeError(f"{name} must have {n_cols} columns, got {values.shape[1]}")
    if not np.all(np.isfinite(values)):
        raise ShapeError(f"{name} contains non-finite entries")
    return values


def as_tensor(values, dtype=torch.float32):
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def state_hash(module_or_arrays):
    """SHA-256 over named parameters/buffers in sorted order."""
    h = hashlib.sha256()
    if isinstance(module_or_arrays, torch.nn.Module):
        items = sorted(module_or_arrays.state_dict().items())
    else:
        items = sorted(module_or_arrays.items())
    for name, value in items:
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def derive_seed(root_seed, *names):
    """Derive an independent 63-bit seed from a root seed and stream names."""
    key = ":".join([str(int(root_seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
