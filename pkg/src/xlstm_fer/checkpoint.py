"""Single-file checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"XLSTMFER"
    4 bytes   format version (uint32)
    8 bytes   header length in bytes (uint64)
    header    UTF-8 JSON, keys sorted: {"config", "meta", "tensors"}
    blobs     raw little-endian tensor data, concatenated

Each ``tensors`` entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` counted from the start of the blob section. Names are hierarchical
(``blocks.0.branches.0.mlstm.W_q``); optimizer moments use the ``optim.m.`` and
``optim.v.`` prefixes.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, XLSTMFER

MAGIC = b"XLSTMFER"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> XLSTMFER:
        model = XLSTMFER(self.config)
        model.load_state_dict(self.params)
        return model


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    tensors = list(ckpt.params.items()) + [(f"optim.{k}", v) for k, v in ckpt.optimizer.items()]
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = _canonical({"config": ckpt.config.to_dict(), "meta": ckpt.meta, "tensors": entries}).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
    buf.write(header)
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def loads(data: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode())
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointError("checkpoint config does not match the expected model config")
    base = 20 + hlen
    params, optim = {}, {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: truncated tensor data")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        if e["name"].startswith("optim."):
            optim[e["name"][len("optim."):]] = arr
        else:
            params[e["name"]] = arr
    return Checkpoint(config, params, header.get("meta", {}), optim)


def save(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file then rename) so a crash never leaves a partial checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(data, expected_config)


def from_model(model: XLSTMFER, meta: dict | None = None, optimizer: dict | None = None) -> Checkpoint:
    return Checkpoint(model.config, {k: v.copy() for k, v in model.state_dict().items()},
                      dict(meta or {}), dict(optimizer or {}))
