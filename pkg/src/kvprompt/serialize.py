"""Binary tensor blobs and on-disk checkpoints.

Blob layout (little-endian)::

    b"KVT1" | u32 dtype code | u32 rank | rank x u64 dims | raw payload

dtype codes: 1 = float32, 2 = float64, 3 = uint8, 4 = int64.

A checkpoint is a directory holding ``manifest.json`` plus one ``.kvt`` blob
per named tensor; names may contain ``/`` and map to subdirectories
(``prompts/visual/0`` -> ``prompts/visual/0.kvt``).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"KVT1"
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3, np.dtype("<i8"): 4}
_DTYPES = {v: k for k, v in _CODES.items()}
MANIFEST = "manifest.json"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<II", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad tensor magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise FormatError("truncated tensor header")
    code, rank = struct.unpack_from("<II", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    end = 12 + 8 * rank
    if len(buf) < end:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - end != expected:
        raise FormatError(f"payload is {len(buf) - end} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, offset=end).reshape(dims).copy()


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Deterministic single-buffer encoding of a named tensor dict (sorted by name)."""
    out = io.BytesIO()
    for name in sorted(tensors):
        encoded = name.encode()
        blob = tensor_to_bytes(tensors[name])
        out.write(struct.pack("<I", len(encoded)) + encoded + struct.pack("<Q", len(blob)) + blob)
    return out.getvalue()


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], manifest: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    for name in names:
        target = path / f"{name}.kvt"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(tensor_to_bytes(tensors[name]))
    doc = dict(manifest)
    doc["tensors"] = names
    (path / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mfile = path / MANIFEST
    if not mfile.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mfile}")
    manifest = json.loads(mfile.read_text())
    tensors = {name: tensor_from_bytes((path / f"{name}.kvt").read_bytes())
               for name in manifest.get("tensors", [])}
    return tensors, manifest
