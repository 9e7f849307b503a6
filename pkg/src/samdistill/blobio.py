"""Raw binary blob and JSON manifest I/O.

Blobs are little-endian arrays prefixed by 8 magic bytes and a 4-byte
version, so corrupt or foreign files fail loudly instead of decoding
into garbage. Used by scene bundles, mask stacks, weight tables, and
model checkpoints.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    MagicMismatchError,
    MalformedManifestError,
    TruncatedBlobError,
)

MAGIC = b"S3DBLOB\x00"
BLOB_VERSION = 1

_HEADER_LEN = len(MAGIC) + 4


def write_blob(path: str | Path, arr: np.ndarray) -> None:
    """Write ``arr`` as magic + version + raw little-endian bytes."""
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", BLOB_VERSION))
        fh.write(le.tobytes())


def read_blob(path: str | Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    """Read a blob written by :func:`write_blob` and validate its size."""
    path = Path(path)
    if not path.exists():
        raise TruncatedBlobError(f"missing blob file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER_LEN:
        raise TruncatedBlobError(f"{path}: too short for a blob header")
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[len(MAGIC) : _HEADER_LEN])
    if version != BLOB_VERSION:
        raise MalformedManifestError(f"{path}: unsupported blob version {version}")
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    payload = raw[_HEADER_LEN:]
    if len(payload) < expected:
        raise TruncatedBlobError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: blob larger than manifest shape {shape}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    # Native byte order, writable copy.
    return arr.astype(arr.dtype.newbyteorder("="))


def dump_manifest(path: str | Path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path, required_keys: tuple[str, ...] = ()) -> dict:
    path = Path(path)
    if not path.exists():
        raise MalformedManifestError(f"missing manifest: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedManifestError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifestError(f"{path}: manifest is not a JSON object")
    missing = [k for k in required_keys if k not in manifest]
    if missing:
        raise MalformedManifestError(f"{path}: missing keys {missing}")
    return manifest
