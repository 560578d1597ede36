"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"TVCK" | u32 version | u32 header_len | header (UTF-8 JSON)
    | float32[num_params] payload | u32 CRC-32 of the payload bytes

The header records the model spec summary, the shape map and free-form
metadata.  Values are stored at 32-bit precision.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TaskMergeError
from .model import LayerShape, ModelSpec, ParamVector

MAGIC = b"TVCK"
VERSION = 1


class CheckpointError(TaskMergeError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"unsupported checkpoint version {found} (expected {expected})")
        self.found = found
        self.expected = expected


class ChecksumError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"payload checksum mismatch: stored {expected:#010x}, computed {found:#010x}")
        self.found = found
        self.expected = expected


@dataclass
class Checkpoint:
    theta: ParamVector
    spec: ModelSpec | None = None
    meta: dict = field(default_factory=dict)


def encode_checkpoint(theta: ParamVector, spec: ModelSpec | None = None,
                      meta: dict | None = None, version: int = VERSION) -> bytes:
    header = {
        "spec": spec.summary() if spec is not None else None,
        "shape_map": [list(s) for s in theta.shape_map],
        "num_params": len(theta),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = theta.values.astype("<f4").tobytes()
    return b"".join([
        MAGIC,
        struct.pack("<II", version, len(hbytes)),
        hbytes,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(version, VERSION)
    pos = 12
    if pos + hlen > len(raw):
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        smap = tuple(LayerShape(str(n), str(k), int(r), int(c)) for n, k, r, c in header["shape_map"])
        n = int(header["num_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed header: {exc}") from exc
    if sum(s.size for s in smap) != n:
        raise CheckpointFormatError("shape map does not cover the payload")
    pos += hlen
    end = pos + 4 * n
    if end + 4 != len(raw):
        raise CheckpointFormatError(f"expected {end + 4} bytes, file has {len(raw)}")
    payload = raw[pos:end]
    (stored,) = struct.unpack_from("<I", raw, end)
    computed = zlib.crc32(payload)
    if computed != stored:
        raise ChecksumError(computed, stored)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    spec = None
    if header.get("spec"):
        s = dict(header["spec"])
        s["hidden_dims"] = tuple(s["hidden_dims"])
        spec = ModelSpec(**s)
    return Checkpoint(ParamVector(values, smap), spec, header.get("meta") or {})


def save_checkpoint(path, theta: ParamVector, spec: ModelSpec | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(theta, spec, meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(raw)
