"""Binary container: a JSON header followed by row-major little-endian f64 arrays.

Layout::

    uint64 LE   header length in bytes
    bytes       UTF-8 JSON header
    bytes       concatenated float64 arrays, C order

The header says how to split the payload; :func:`pack` records shapes under
``"arrays"`` unless the caller passes ``shapes_in_header=False`` and knows the
shapes from other header fields.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

_LEN = struct.Struct("<Q")


def pack(header: dict, arrays: Iterable[tuple[str, np.ndarray]], shapes_in_header: bool = True) -> bytes:
    arrays = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in arrays]
    head = dict(header)
    if shapes_in_header:
        head["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    return _LEN.pack(len(raw)) + raw + b"".join(a.tobytes() for _, a in arrays)


def unpack_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _LEN.size:
        raise InvalidInputError("blob truncated before header length")
    (n,) = _LEN.unpack_from(data, 0)
    end = _LEN.size + n
    if len(data) < end:
        raise InvalidInputError("blob truncated inside header")
    return json.loads(data[_LEN.size:end].decode("utf-8")), end


def unpack(data: bytes, shapes: Sequence[tuple[str, tuple]] | None = None) -> tuple[dict, dict]:
    header, off = unpack_header(data)
    if shapes is None:
        shapes = [(e["name"], tuple(e["shape"])) for e in header.get("arrays", [])]
    out = {}
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise InvalidInputError(f"blob truncated in array {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise InvalidInputError(f"blob has {len(data) - off} trailing bytes")
    return header, out


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
