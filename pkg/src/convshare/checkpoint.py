"""Single-file checkpoints.

Layout::

    8 bytes   magic  b"CSVITCKP"
    4 bytes   format version, little-endian uint32
    8 bytes   header length N, little-endian uint64
    N bytes   header, canonical JSON (sorted keys, no whitespace)
    ...       tensor payload, little-endian float64, in header order

The header holds ``config`` (ModelConfig fields), ``precision``, ``seed``,
``epoch`` and ``tensors``: a list of ``{name, shape, offset}`` where
``offset`` counts bytes from the start of the payload.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .model import ConvShareViT, ModelConfig

MAGIC = b"CSVITCKP"
FORMAT_VERSION = 1
_PRECISIONS = {"double": np.float64, "single": np.float32}


def precision_name(dtype):
    return "single" if np.dtype(dtype) == np.float32 else "double"


def save_checkpoint(path, model, seed=0, epoch=0):
    names = sorted(model.params)
    tensors, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        tensors.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": json.loads(model.config.to_json()),
        "epoch": int(epoch),
        "format_version": FORMAT_VERSION,
        "precision": precision_name(model.dtype),
        "seed": int(seed),
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def _field(header, key):
    if key not in header:
        raise CheckpointError("missing from header", field=key)
    return header[key]


def load_checkpoint(path):
    """Returns ``(model, meta)`` where ``meta`` has ``seed`` and ``epoch``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file", field="magic")
    if len(data) < 20:
        raise CheckpointError("file truncated", field="header_length")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}", field="format_version")
    try:
        header = json.loads(data[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header ({exc})", field="header") from exc
    try:
        config = ModelConfig.from_dict(_field(header, "config"))
    except (ConfigurationError, TypeError) as exc:
        raise CheckpointError(str(exc), field="config") from exc
    precision = _field(header, "precision")
    if precision not in _PRECISIONS:
        raise CheckpointError(f"unknown precision {precision!r}", field="precision")
    dtype = _PRECISIONS[precision]
    payload = memoryview(data)[20 + hlen:]
    params = {}
    for entry in _field(header, "tensors"):
        name = entry.get("name", "?")
        try:
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError("malformed tensor entry", field=f"tensors.{name}") from exc
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or start + nbytes > len(payload):
            raise CheckpointError("payload truncated", field=f"tensors.{name}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape)
        params[name] = arr.astype(dtype)
    expected = ConvShareViT(config, seed=0, dtype=dtype).params
    for name, arr in expected.items():
        if name not in params:
            raise CheckpointError("tensor missing", field=f"tensors.{name}")
        if params[name].shape != arr.shape:
            raise CheckpointError(
                f"shape {params[name].shape} != expected {arr.shape}", field=f"tensors.{name}"
            )
    extra = set(params) - set(expected)
    if extra:
        raise CheckpointError("unexpected tensor", field=f"tensors.{sorted(extra)[0]}")
    meta = {"seed": int(_field(header, "seed")), "epoch": int(_field(header, "epoch"))}
    return ConvShareViT(config, params=params, dtype=dtype), meta
