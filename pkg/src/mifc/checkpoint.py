"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"MIFC"
    version u32      currently 1
    count   u32      number of named tensors
    per tensor:
        name_len u32, name utf-8
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u32
        dims     u64 * ndim
        data     raw little-endian values, row-major
    meta_len u32, metadata utf-8 (canonical JSON)

Writes are canonical (fixed tensor order, sorted JSON keys), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .blocks import build_model
from .errors import FormatError
from .prng import SplitMix64

MAGIC = b"MIFC"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    version: int
    tensors: dict[str, np.ndarray]
    metadata: dict


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        if np.dtype(arr.dtype) not in _CODE_FOR:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", _CODE_FOR[np.dtype(arr.dtype)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(np.ascontiguousarray(le).tobytes())
    meta = canonical_json(metadata).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def write_checkpoint(tensors: dict[str, np.ndarray], metadata: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(tensors, metadata))


def save_checkpoint(model, metadata: dict, path) -> None:
    """Write a model's parameters and batchnorm buffers plus metadata."""
    write_checkpoint(model.state_tensors(), metadata, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError("truncated checkpoint file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def parse_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic; not a MIFC file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        code = r.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        dt = _DTYPE_CODES[code]
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = np.ascontiguousarray(data.astype(dt.newbyteorder("=")))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.off != len(blob):
        raise FormatError("trailing bytes after checkpoint metadata")
    return Checkpoint(version, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def model_from_checkpoint(source) -> tuple[object, dict]:
    """Rebuild the model recorded in a checkpoint and load its weights.

    ``source`` is a path or a parsed Checkpoint. The metadata must carry the
    resolved config (arch, backbone, image_size, precision).
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = ckpt.metadata.get("config")
    if not isinstance(cfg, dict):
        raise FormatError("checkpoint metadata lacks the resolved config")
    try:
        model = build_model(
            cfg["arch"],
            cfg["backbone"],
            int(cfg["image_size"]),
            prng=SplitMix64(int(cfg.get("seed", 0))),
            dtype=cfg.get("precision", "f32"),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint config lacks key {exc}") from exc
    model.load_state(ckpt.tensors)
    return model, ckpt.metadata
