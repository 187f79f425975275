"""Versioned binary container for named float32 arrays plus a JSON config.

Layout (all integers little-endian)::

    magic   b"VTCK"
    version u32
    hlen    u32            length of the JSON header in bytes
    header  UTF-8 JSON     {"config": {...}, "tensors": [{"name", "shape", "offset"}]}
    data    float32 <f4    concatenated tensors, row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"VTCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save(path: str | Path, tensors: Mapping[str, Any], config: Mapping[str, Any] | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": dict(config or {}), "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[_PREFIX.size : _PREFIX.size + hlen])
    data = memoryview(blob)[_PREFIX.size + hlen :]
    tensors = {}
    for item in header["tensors"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        start = item["offset"]
        if start + 4 * count > len(data):
            raise CheckpointError(f"{path}: tensor {item['name']} runs past end of file")
        arr = np.frombuffer(data[start : start + 4 * count], dtype="<f4")
        tensors[item["name"]] = arr.reshape(item["shape"]).astype(np.float32)
    return tensors, header["config"]


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    current = module.state_dict()
    missing = set(current) - set(tensors)
    extra = set(tensors) - set(current)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model: missing={sorted(missing)} extra={sorted(extra)}"
        )
    module.load_state_dict(
        {k: torch.from_numpy(np.array(v)).to(current[k].dtype) for k, v in tensors.items()}
    )
