"""Binary checkpoint container.

Layout (little-endian)::

    b"SSE1"  | uint32 manifest length | UTF-8 manifest | float32 payloads

Manifest lines are ``tensor <name> <rows> <cols> <offset>`` (offset in bytes
from the start of the payload section), ``card <i> <cardinality>`` and
``config <key>=<value>``.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"SSE1"


class CheckpointError(ValueError):
    pass


def dumps(params: ModelParams) -> bytes:
    lines, payloads, offset = [], [], 0
    for name, arr in params.arrays.items():
        if arr.ndim != 2:
            raise CheckpointError(f"{name}: checkpoint tensors are 2-D")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]} {offset}")
        payloads.append(data)
        offset += len(data)
    lines += [f"card {i} {c}" for i, c in enumerate(params.cardinalities)]
    lines += [f"config {line}" for line in params.config.to_lines()]
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(payloads)


def loads(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (size,) = struct.unpack("<I", blob[4:8])
    manifest = blob[8:8 + size].decode("utf-8")
    payload = memoryview(blob)[8 + size:]
    arrays, cards, config = {}, {}, {}
    for line in manifest.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "tensor":
            name, rows, cols, offset = rest.split(" ")
            rows, cols, offset = int(rows), int(cols), int(offset)
            n = rows * cols
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
            arrays[name] = arr.astype(np.float32).reshape(rows, cols)
        elif kind == "card":
            i, c = rest.split(" ")
            cards[int(i)] = int(c)
        elif kind == "config":
            key, _, value = rest.partition("=")
            config[key] = value
        elif line:
            raise CheckpointError(f"unknown manifest line {line!r}")
    cardinalities = [cards[i] for i in range(len(cards))]
    return ModelParams(ModelConfig.from_mapping(config), cardinalities, arrays)


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(params))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
