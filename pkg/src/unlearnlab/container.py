"""Binary container shared by checkpoints, snapshots, deltas and datasets.

Layout (all text is ASCII, all numbers little-endian)::

    UNLEARNLAB\\n
    <kind> <version>\\n
    <header byte length>\\n
    <JSON header>\\n
    <raw array payloads, back to back>

The JSON header carries free-form ``meta`` plus an ``arrays`` table with
``name``, ``dtype`` (``<f8`` or ``<i8``), ``shape``, ``offset`` and ``nbytes``
for each payload. Offsets are relative to the first payload byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"UNLEARNLAB"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CorruptFileError(ValueError):
    pass


class UnsupportedVersionError(ValueError):
    pass


class WrongKindError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8"
    if np.issubdtype(arr.dtype, np.integer):
        return "<i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        tag = _dtype_tag(np.asarray(arr))
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        table.append(
            {"name": name, "dtype": tag, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join(
        [MAGIC, b"\n", f"{kind} {FORMAT_VERSION}\n".encode(), f"{len(header)}\n".encode(), header, b"\n", *chunks]
    )


def decode(blob: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    lines = blob.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != MAGIC:
        raise CorruptFileError("bad magic")
    try:
        file_kind, version = lines[1].decode().split(" ")
        version = int(version)
        header_len = int(lines[2])
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptFileError("unreadable preamble") from exc
    if file_kind != kind:
        raise WrongKindError(f"expected a {kind!r} file, found {file_kind!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{kind} format version {version} is not supported")
    rest = lines[3]
    if len(rest) < header_len + 1 or rest[header_len : header_len + 1] != b"\n":
        raise CorruptFileError("truncated header")
    try:
        header = json.loads(rest[:header_len])
        table, meta = header["arrays"], header["meta"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise CorruptFileError("corrupt header") from exc
    payload = rest[header_len + 1 :]
    arrays = {}
    expected = 0
    for entry in table:
        try:
            dtype = _DTYPES.get(entry["dtype"])
            shape = tuple(int(d) for d in entry["shape"])
            start, declared = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFileError("corrupt array table") from exc
        if dtype is None:
            raise CorruptFileError(f"unknown dtype {entry['dtype']}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != declared or start < 0 or start + nbytes > len(payload):
            raise CorruptFileError(f"payload for {entry['name']!r} is truncated or mis-sized")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        expected = max(expected, start + nbytes)
    if expected != len(payload):
        raise CorruptFileError("trailing bytes after payload")
    return meta, arrays


def write(path, kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(kind, meta, arrays))


def read(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind)


def digest(*arrays: np.ndarray) -> str:
    """sha256 over little-endian float64 bytes; used as a parameter fingerprint."""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
