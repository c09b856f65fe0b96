"""Single-file checkpoint format.

Layout: 8-byte magic ``TGRL0001``, a little-endian uint64 header length, the
UTF-8 JSON header, then every array as raw little-endian float64 in the
order listed by the header manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TGRL0001"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    """Bad magic or unsupported format version."""


class TruncatedError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    """Header manifest disagrees with itself or with the payload."""


@dataclass
class Checkpoint:
    meta: dict  # architecture, optimizer scalars, step counter
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def equals(self, other: "Checkpoint") -> bool:
        if self.meta != other.meta or self.config != other.config or self.version != other.version:
            return False
        if list(self.arrays) != list(other.arrays):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays.values(), other.arrays.values())
        )


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    offset = 0
    payload = []
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = {
        "version": ckpt.version,
        "meta": ckpt.meta,
        "config": ckpt.config,
        "arrays": manifest,
        "payload_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise VersionError(f"not a checkpoint or unsupported version (magic {data[:8]!r}, expected {MAGIC!r})")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise TruncatedError(f"header declares {hlen} bytes but file has {len(data) - 16}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"format version {header.get('version')} != {FORMAT_VERSION}")
    body = data[16 + hlen:]
    total = header.get("payload_bytes")
    if not isinstance(total, int):
        raise ManifestError("header lacks payload_bytes")
    if len(body) < total:
        raise TruncatedError(f"payload has {len(body)} bytes, header declares {total}")
    if len(body) > total:
        raise ManifestError(f"{len(body) - total} trailing bytes after declared payload")
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["arrays"]:
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if name in arrays:
            raise ManifestError(f"duplicate array {name!r}")
        if off != expected:
            raise ManifestError(f"array {name!r} at offset {off}, expected {expected}")
        if int(np.prod(shape, dtype=np.int64)) * 8 != nbytes:
            raise ManifestError(f"array {name!r}: shape {list(shape)} needs {int(np.prod(shape)) * 8} bytes, manifest says {nbytes}")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(shape)
        expected += nbytes
    if expected != total:
        raise ManifestError(f"manifest covers {expected} bytes, payload_bytes says {total}")
    return Checkpoint(header["meta"], arrays, header["config"], header["version"])


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
