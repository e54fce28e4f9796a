"""Parameter checkpoint files.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"AGCKPT01"
    bytes 8..15   uint64 header length H
    bytes 16..    H bytes of UTF-8 JSON header
    then          raw float64 ('<f8') payload, tensors concatenated in header order

The header is ``{"byte_order": "little", "dtype": "float64", "meta": {...},
"tensors": [{"name", "shape", "offset", "count"}, ...]}`` where ``offset`` and
``count`` are in float64 elements from the start of the payload. JSON keys are
sorted so identical parameters always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from actiongrad.autodiff.tensor import Tensor
from actiongrad.errors import ParseError

MAGIC = b"AGCKPT01"


def to_bytes(params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"byte_order": "little", "dtype": "float64", "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from None
    payload = np.frombuffer(blob[16 + hlen:], dtype="<f8")
    arrays = {}
    for e in header["tensors"]:
        start, count = e["offset"], e["count"]
        if start + count > payload.size:
            raise ParseError(f"tensor {e['name']!r} runs past end of payload")
        arrays[e["name"]] = payload[start:start + count].astype(np.float64).reshape(e["shape"])
    return arrays, header.get("meta", {})


def save(path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    blob = to_bytes(params, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
