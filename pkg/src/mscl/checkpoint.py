"""Binary checkpoint format.

Layout: magic "MSCL", little-endian u32 version, little-endian u64 JSON
header length, the JSON header, then contiguous little-endian float32
payloads. The header carries the tensor directory (name, shape, byte
offset into the payload region) plus a free-form ``meta`` object for the
run configuration, vocabulary, and optimizer bookkeeping.

Training state is quantized through float32 at every epoch boundary, so a
save/load round trip at a boundary is lossless and resumed runs match
uninterrupted ones bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"MSCL"
VERSION = 1


def quantize_fp32(array: np.ndarray) -> np.ndarray:
    """Round a float64 array through float32 and back."""
    return array.astype(np.float32).astype(np.float64)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    directory = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=np.float32)
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": directory, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", VERSION))
        handle.write(struct.pack("<Q", len(header)))
        handle.write(header)
        for blob in payloads:
            handle.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read tensors (as float64 arrays) and the meta object."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_start = 16
    payload_start = header_start + header_len
    try:
        header = json.loads(raw[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + entry["offset"]
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = flat.astype(np.float64).reshape(shape)
    return tensors, header.get("meta", {})
