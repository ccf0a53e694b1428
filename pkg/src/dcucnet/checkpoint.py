"""DCUC checkpoint files.

Layout (all integers little-endian)::

    b"DCUC" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 dims | f32 row-major payload
    u32 CRC32 of every preceding byte

The model configuration travels inside the archive as the rank-1 tensor
``meta.config`` whose elements are the bytes of its key=value text.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .config import build, dump_kv, flatten, parse_kv
from .errors import ChecksumError, FormatError

MAGIC = b"DCUC"
VERSION = 1
CONFIG_KEY = "meta.config"


def encode_tensors(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes, source: str = "<checkpoint>") -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16:
        raise FormatError(f"{source}: too short for a DCUC checkpoint ({len(blob)} bytes)")
    # CRC before magic, so a flipped header byte still counts as corruption
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: CRC32 mismatch, file is corrupted or not a DCUC checkpoint")
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: not a DCUC checkpoint")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.copy()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: truncated or malformed tensor table ({exc})") from exc
    if pos != len(body):
        raise FormatError(f"{source}: {len(body) - pos} trailing bytes after tensor table")
    return out


def model_tensors(model) -> "OrderedDict[str, np.ndarray]":
    tensors = OrderedDict()
    cfg_text = dump_kv(flatten(model.config)).encode("utf-8")
    tensors[CONFIG_KEY] = np.frombuffer(cfg_text, dtype=np.uint8).astype(np.float32)
    for name, t in model.state_dict().items():
        tensors[name] = t.detach().cpu().to(torch.float64).numpy().astype(np.float32)
    return tensors


def save_checkpoint(path, model) -> None:
    Path(path).write_bytes(encode_tensors(model_tensors(model)))


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild a :class:`~dcucnet.model.DCUCNet` from a checkpoint file."""
    from .model import DCUCNet, ModelConfig

    path = Path(path)
    tensors = decode_tensors(path.read_bytes(), str(path))
    if CONFIG_KEY not in tensors:
        raise FormatError(f"{path}: checkpoint carries no {CONFIG_KEY} entry")
    cfg_text = tensors.pop(CONFIG_KEY).astype(np.uint8).tobytes().decode("utf-8")
    config = build(ModelConfig, parse_kv(cfg_text, str(path)))
    model = DCUCNet(config).to(dtype)
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise FormatError(f"{path}: tensor names do not match the model "
                          f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})")
    loaded = OrderedDict()
    for name, ref in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(loaded)
    model.eval()
    return model
