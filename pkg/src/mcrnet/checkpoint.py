"""Binary checkpoints.

Layout: ``b"MCRNET1"``, a little-endian uint32 header length, a UTF-8 JSON
header (config, step, seed, parameter names and shapes, keys sorted), then
every parameter as row-major little-endian float32 in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = b"MCRNET1"


@dataclass
class Checkpoint:
    config: RunConfig
    vocab_size: int
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "vocab_size": ckpt.vocab_size,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.params.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in ckpt.params.values())
    return MAGIC + struct.pack("<I", len(head)) + head + body


def from_bytes(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise ValueError("not an MCRNET1 checkpoint")
    (n,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start:start + n].decode("utf-8"))
    offset = start + n
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        name = entry["name"]
        if name in params:
            raise ValueError(f"parameter {name} appears twice")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    cfg = RunConfig.from_mapping(header["config"])
    return Checkpoint(cfg, header["vocab_size"], params, header["step"], header["seed"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
