"""Binary checkpoint format shared by the VAE and the denoiser.

Layout::

    magic      8 bytes, e.g. b"SFVAE001"
    length     uint64 little-endian, byte length of the JSON header
    header     UTF-8 JSON; ``arrays`` lists ``{"name", "shape"}`` in file order
    payload    little-endian float64 arrays, concatenated in header order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VAE_MAGIC = b"SFVAE001"
LDM_MAGIC = b"SFLDM001"


class CheckpointError(ValueError):
    """Malformed, mismatched or unreadable checkpoint."""


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<Q", len(blob)), blob]
    for v in arrays.values():
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != magic:
        raise CheckpointError(f"bad magic: expected {magic!r}, found {data[:8]!r}")
    (length,) = struct.unpack("<Q", data[8:16])
    if 16 + length > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset = 16 + length
    arrays: dict[str, np.ndarray] = {}
    for spec in header.get("arrays", []):
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise CheckpointError(f"truncated payload at array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after payload")
    return header, arrays


def save(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(magic, header, arrays))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, magic)
