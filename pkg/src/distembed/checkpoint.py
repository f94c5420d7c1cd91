"""Checkpoint container ``GCKP``.

Layout (little-endian): magic ``b"GCKP"``, version u32, entry count u32, then
per entry a u32 name length, the UTF-8 name and one GTEN-encoded tensor.  A
CRC-32 (u32) of every preceding byte closes the file.  Non-tensor metadata
(model config, epoch, run settings) travels as JSON in the ``__meta__`` entry,
stored as a rank-1 tensor of byte values.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .errors import ChecksumError, DecodeError, VersionError
from .tensor_io import decode_tensor, encode_tensor

MAGIC = b"GCKP"
VERSION = 1
META_KEY = "__meta__"


def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries = dict(tensors)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(encode_tensor(arr))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        if buf[:4] == MAGIC or len(buf) < 4:
            raise ChecksumError("checkpoint truncated")
        raise DecodeError("not a GCKP checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC mismatch (corrupt or truncated file)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    pos, tensors, meta = 12, {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + n].decode("utf-8")
        arr, pos = decode_tensor(body, pos + 4 + n)
        if name == META_KEY:
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            tensors[name] = arr
    if pos != len(body):
        raise DecodeError("trailing bytes in checkpoint body")
    return tensors, meta


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def save_model(path, model, optimizer=None, epoch: int = 0, extra: Optional[dict] = None) -> None:
    """Write model parameters (priors included), optional optimizer moments and run metadata."""
    tensors = model.state_dict()
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = {"model_config": model.config.to_dict(), "epoch": int(epoch)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, tensors, meta)


def load_model(path, optimizer=None):
    """Rebuild an :class:`EmbedModel` from a checkpoint; returns ``(model, meta)``."""
    from .model import EmbedModel, ModelConfig

    tensors, meta = load_checkpoint(path)
    model = EmbedModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(tensors)
    if optimizer is not None:
        optimizer.load_state_tensors(tensors)
    return model, meta


def load_into(model, path) -> dict:
    """Load a checkpoint into an existing model; shape errors name the offending tensor."""
    tensors, meta = load_checkpoint(path)
    model.load_state_dict(tensors)
    return meta
