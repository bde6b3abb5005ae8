"""Versioned binary parameter container.

Layout: magic ``IHVT`` | format version u32 LE | header length u64 LE |
JSON header ``{config, tensors: [{name, shape, dtype, offset}]}`` |
payload of concatenated raw little-endian IEEE-754 f32 values.
Offsets are payload-relative and strictly increasing; a load of a save
reproduces bit-identical parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor, UsageError

MAGIC = b"IHVT"
FORMAT_VERSION = 1


def save_checkpoint(params: dict[str, Tensor | np.ndarray], config: dict, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype != np.float32:
            raise UsageError(
                f"checkpoint payload is f32-only; parameter {name!r} has dtype {arr.dtype}"
            )
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
        })
        blob = arr.astype("<f4", copy=False).tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 16:
        raise FormatError(f"{path}: truncated preamble ({len(data)} bytes)", offset=len(data))
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", offset=4)
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise FormatError(f"{path}: truncated header ({len(data) - 16} of {hlen} bytes)", offset=16)
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}", offset=16) from None
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise FormatError(f"{path}: header missing tensor manifest", offset=16)

    expected = 0
    last = -1
    for e in entries:
        if e["offset"] <= last:
            raise FormatError(
                f"{path}: tensor offsets not strictly increasing at {e['name']!r}",
                offset=16 + hlen + e["offset"],
            )
        if e["offset"] != expected:
            raise FormatError(
                f"{path}: tensor {e['name']!r} at offset {e['offset']}, expected {expected}",
                offset=16 + hlen + expected,
            )
        last = e["offset"]
        expected += 4 * int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 4

    payload = data[16 + hlen:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}",
            offset=16 + hlen + min(len(payload), expected),
        )
    params: dict[str, np.ndarray] = {}
    for e in entries:
        size = 4 * int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 4
        raw = payload[e["offset"]:e["offset"] + size]
        params[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return params, header.get("config", {})
