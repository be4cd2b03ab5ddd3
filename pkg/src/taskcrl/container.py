"""Binary container shared by datasets and checkpoints.

Layout (little-endian)::

    b"CRL1" | version u32 | header_len u32 | JSON header | float64 arrays...

The header lists each array's name and shape in payload order and carries a
SHA-256 of the payload so truncation or corruption is detected on load.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CRL1"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class ContainerError(Exception):
    pass


class FormatError(ContainerError):
    """Not a CRL1 file."""


class VersionError(ContainerError):
    pass


class CorruptFileError(ContainerError):
    """Truncated payload or hash mismatch."""


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(arrays: dict[str, np.ndarray], meta: dict, kind: str) -> bytes:
    entries = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "arrays": entries,
        "meta": meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        if blob[:4] != MAGIC[: len(blob)]:
            raise FormatError("foreign magic bytes")
        raise CorruptFileError("file shorter than container prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"foreign magic bytes {magic!r}")
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CorruptFileError("truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    payload = blob[start + hlen:]
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"])
    if len(payload) != expected:
        raise CorruptFileError(f"payload has {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptFileError("payload hash mismatch")
    arrays = {}
    off = 0
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(e["shape"]).astype(np.float64)
        off += 8 * n
    return header, arrays


def write_container(path, arrays: dict[str, np.ndarray], meta: dict, kind: str) -> None:
    atomic_write_bytes(path, encode(arrays, meta, kind))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
