"""Flat tensor container used for ``weights.bin`` and ``classifier.bin``.

Layout (all integers little-endian)::

    magic    b"RRW1"
    count    uint32
    count x  { name_len uint16, name utf-8, ndim uint8, dims uint32[ndim],
               payload float32[prod(dims)] }

Tensors appear in ``state_dict`` order.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RRW1"


class CheckpointError(RuntimeError):
    pass


class MissingCheckpointFileError(CheckpointError, FileNotFoundError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def encode_tensors(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CorruptCheckpointError(f"truncated weights file at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic; not a weights file")
    pos = 4
    (count,) = take("<I")
    out = OrderedDict()
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(data):
            raise CorruptCheckpointError("truncated tensor name")
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CorruptCheckpointError(f"truncated payload for tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save_module(module: torch.nn.Module, path):
    atomic_write_bytes(path, encode_tensors(module.state_dict()))


def load_into(module: torch.nn.Module, path):
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointFileError(f"{path} not found")
    tensors = decode_tensors(path.read_bytes())
    expected = module.state_dict()
    missing = [k for k in expected if k not in tensors]
    extra = [k for k in tensors if k not in expected]
    if missing or extra:
        raise ShapeMismatchError(f"tensor names differ from the configured model: missing {missing[:5]}, "
                                 f"unexpected {extra[:5]}")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(tensors[k].shape):
            raise ShapeMismatchError(f"{k}: checkpoint shape {tuple(tensors[k].shape)} vs model {tuple(v.shape)}")
    module.load_state_dict({k: tensors[k].to(v.dtype) for k, v in expected.items()})
    return module
