"""Versioned binary container used for models, backbones and task-family caches.

Layout::

    b"XLAB" | u16 format version | u16 kind length | kind (ascii)
    | u32 header length | header (UTF-8 JSON, sorted keys)
    | arrays, each float64 little-endian, in header["arrays"] order

The header carries the model description fields and the shape of every array, so a reader
can recover the arrays without knowing the writer's code.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"XLAB"
FORMAT_VERSION = 1


def write_container(path, kind: str, fields: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(fields)
    header["arrays"] = [[name, list(np.shape(arr))] for name, arr in arrays]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    kind_b = kind.encode("ascii")
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<H", len(kind_b)),
        kind_b,
        struct.pack("<I", len(head)),
        head,
    ]
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path, expected_kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic bytes")
    try:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported format version {version}")
        (klen,) = struct.unpack_from("<H", blob, 6)
        kind = blob[8 : 8 + klen].decode("ascii")
        if kind != expected_kind:
            raise ParseError(f"{path}: expected a {expected_kind!r} file, found {kind!r}")
        off = 8 + klen
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
        off += hlen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header ({exc})") from None
    arrays = {}
    for name, shape in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(blob):
            raise ParseError(f"{path}: truncated array {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        off += nbytes
    if off != len(blob):
        raise ParseError(f"{path}: {len(blob) - off} trailing bytes")
    return header, arrays
