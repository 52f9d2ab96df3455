"""Model checkpoints.

Layout (all integers little-endian)::

    b"ESCK" | version u32 | meta_len u32 | meta (UTF-8 JSON)
    then, for each tensor in meta["tensors"] order: raw float64 LE data

``meta`` holds the codec config, the model seed, and ``[name, shape]`` for
every tensor, so a file is fully self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .csrvq import CodecConfig, CodecModel

MAGIC = b"ESCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def dumps(model: CodecModel, extra: dict | None = None) -> bytes:
    state = model.state_dict()
    meta = {"config": model.config.to_dict(), "seed": model.seed,
            "tensors": [[k, list(v.shape)] for k, v in state.items()], "extra": extra or {}}
    head = json.dumps(meta, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in state.values())
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + body


def loads(data: bytes) -> tuple[CodecModel, dict]:
    if len(data) < _PREFIX.size:
        raise CheckpointError("checkpoint shorter than its prefix")
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(data[_PREFIX.size:_PREFIX.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    model = CodecModel(CodecConfig.from_dict(meta["config"]), seed=meta.get("seed", 0))
    offset = _PREFIX.size + n
    state = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {name!r}")
        state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} unexpected trailing bytes")
    model.load_state_dict(state)
    return model, meta.get("extra", {})


def save(model: CodecModel, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


def load(path: str | Path) -> tuple[CodecModel, dict]:
    return loads(Path(path).read_bytes())
