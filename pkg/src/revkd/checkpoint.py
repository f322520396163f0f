"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CBCK"                 magic
    uint32                  format version (1)
    uint32                  header length in bytes
    header                  UTF-8 JSON: {"config": {...}, "tensors": [[path, shape], ...]}
    float64[...]            tensor payloads, in header order
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from revkd.autodiff import Tensor
from revkd.model import ModelConfig, Weights, param_shapes

MAGIC = b"CBCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def save_checkpoint(weights: Weights, config: ModelConfig, path: str | os.PathLike) -> None:
    entries = [[name, list(t.shape)] for name, t in weights.items()]
    header = json.dumps({"config": config.to_dict(), "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for t in weights.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, requires_grad: bool = False) -> tuple[Weights, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("magic", f"expected {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError("version", "file truncated before header length")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointFormatError("version", f"unsupported version {version}")
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise CheckpointFormatError("header", "file truncated inside header")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
        config = ModelConfig(**header["config"])
        entries = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError("header", f"malformed header ({exc})") from None
    try:
        config.validate()
    except ValueError as exc:
        raise CheckpointFormatError("config", str(exc)) from None
    expected = param_shapes(config)
    if entries != expected:
        for (name, shape), (want_name, want_shape) in zip(entries, expected):
            if name != want_name or shape != want_shape:
                raise CheckpointFormatError(
                    f"tensor {name}", f"shape/name {shape} does not match config ({want_name} {want_shape})"
                )
        raise CheckpointFormatError("tensors", f"expected {len(expected)} tensors, header lists {len(entries)}")
    n_values = sum(math.prod(shape) for _, shape in entries)
    payload = blob[header_end:]
    if len(payload) != 8 * n_values:
        raise CheckpointFormatError("payload", f"expected {8 * n_values} bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights: Weights = {}
    offset = 0
    for name, shape in entries:
        n = math.prod(shape)
        weights[name] = Tensor(flat[offset:offset + n].reshape(shape), requires_grad=requires_grad)
        offset += n
    return weights, config
