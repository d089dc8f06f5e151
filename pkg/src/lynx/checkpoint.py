"""Single-file named-tensor container ("lynx-ckpt").

Layout::

    u64 little-endian header length N
    N bytes of UTF-8 JSON header
    raw little-endian tensor payloads, each 8-byte aligned

The header carries ``format``, ``version``, a ``config`` echo, free-form
``metadata`` and a ``tensors`` directory mapping each dotted name to its
dtype, shape, payload offset and byte count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import torch
from torch import Tensor

FORMAT = "lynx-ckpt"
VERSION = 1

_DTYPES = {
    "float16": torch.float16, "float32": torch.float32, "float64": torch.float64,
    "int32": torch.int32, "int64": torch.int64, "uint8": torch.uint8, "bool": torch.bool,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, Tensor]
    config: dict[str, Any] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, Tensor],
                    config: Optional[Mapping[str, Any]] = None,
                    metadata: Optional[Mapping[str, Any]] = None) -> Path:
    path = Path(path)
    directory: dict[str, dict[str, Any]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        directory[name] = {"dtype": _NAMES[t.dtype], "shape": list(t.shape),
                           "offset": offset, "nbytes": len(raw)}
        pad = (-len(raw)) % 8
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"format": FORMAT, "version": VERSION, "config": dict(config or {}),
                         "metadata": dict(metadata or {}), "tensors": directory},
                        sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def read_header(path: Union[str, Path]) -> dict[str, Any]:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", head)
        try:
            header = json.loads(f.read(n))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: header is not valid JSON ({e})") from None
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file (format={header.get('format')!r})")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header = read_header(path)
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    base = 8 + n
    tensors = {}
    for name, e in header["tensors"].items():
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype {e['dtype']!r} for {name!r}")
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: payload of {name!r} is truncated")
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(tensors, header.get("config", {}), header.get("metadata", {}),
                      header["version"])
