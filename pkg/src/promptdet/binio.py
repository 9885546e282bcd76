"""Flat binary codecs used for every on-disk artifact.

All integers are little-endian. Tensors are written as raw float32 /
uint16 payloads so the files can be read from any language without an
image or array library.
"""

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"P3IMG1\0\0"
MASK_MAGIC = b"P3MASK1\0"
SCOREMAP_MAGIC = b"P3SMAP1\0"
CKPT_MAGIC = b"P3CKPT1\0"


class FormatError(ValueError):
    """Raised when a file does not carry the expected header."""


def _check_magic(buf, magic, path):
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")


def write_image(path, pixels):
    pixels = np.asarray(pixels, dtype="<f4")
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_image(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, IMAGE_MAGIC, path)
    h, w = struct.unpack_from("<II", buf, 8)
    data = np.frombuffer(buf, dtype="<f4", offset=16)
    if data.size != h * w * 3:
        raise FormatError(f"{path}: payload size {data.size} != {h}x{w}x3")
    return data.reshape(h, w, 3).astype(np.float32)


def write_mask(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(mask.astype("<u2")).tobytes())


def read_mask(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, MASK_MAGIC, path)
    h, w = struct.unpack_from("<II", buf, 8)
    data = np.frombuffer(buf, dtype="<u2", offset=16)
    if data.size != h * w:
        raise FormatError(f"{path}: payload size {data.size} != {h}x{w}")
    return data.reshape(h, w).astype(np.int64)


def write_score_map(path, values, grid):
    """Write an (H'W') x |C| score matrix with its grid shape."""
    values = np.asarray(values, dtype="<f4")
    gh, gw = grid
    if values.ndim != 2 or values.shape[0] != gh * gw:
        raise ValueError(f"score map rows {values.shape} do not match grid {grid}")
    with open(path, "wb") as fh:
        fh.write(SCOREMAP_MAGIC + struct.pack("<III", gh, gw, values.shape[1]))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_score_map(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, SCOREMAP_MAGIC, path)
    gh, gw, nc = struct.unpack_from("<III", buf, 8)
    data = np.frombuffer(buf, dtype="<f4", offset=20)
    if data.size != gh * gw * nc:
        raise FormatError(f"{path}: payload size {data.size} != {gh}x{gw}x{nc}")
    return data.reshape(gh * gw, nc).astype(np.float64), (gh, gw)


def write_checkpoint(path, tensors, meta=None):
    """Write named float32 arrays into a single checkpoint container.

    Layout: magic, uint64 header length, UTF-8 JSON header, raw payloads.
    The header lists name, shape, dtype and byte offset (relative to the
    start of the payload section) for each tensor, plus free-form ``meta``.
    """
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint(path):
    """Return ``(tensors, meta)`` from a checkpoint container."""
    buf = Path(path).read_bytes()
    _check_magic(buf, CKPT_MAGIC, path)
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = OrderedDict()
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(buf, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, header["meta"]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_sha256(*arrays):
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
