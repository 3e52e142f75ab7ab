"""Named-tensor binary container shared by checkpoints and pre-decoded datasets.

Layout (all integers little-endian)::

    b"HDSW" | u32 version | u64 section count
    per section: u32 name length | UTF-8 name | u8 dtype code | u8 rank
                 | u64 extents[rank] | raw payload
    u32 CRC32 of every preceding byte

dtype codes: 1 = float32, 2 = float64, 3 = int64.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"HDSW"
VERSION = 1

_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


def encode(sections: Mapping[str, np.ndarray]) -> bytes:
    """Serialize sections in the given order."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(sections)))
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _CODES.get(np.dtype(dt).newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"section {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, source="<bytes>") -> dict[str, np.ndarray]:
    """Parse a container; raises :class:`CheckpointError` on any defect."""
    if len(data) < 4 + 12 + 4:
        raise CheckpointError(f"{source}: truncated container ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: checksum mismatch (file truncated or corrupt)")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: container version {version}, expected {VERSION}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            if code not in _DTYPES:
                raise CheckpointError(f"{source}: section {name!r} has unknown dtype code {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{source}: section {name!r} runs past the end")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: malformed section table ({e})") from e
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes after last section")
    return out


def save(path, sections: Mapping[str, np.ndarray]) -> None:
    """Write atomically via a sibling temp file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(sections))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read ({e.strerror or e})") from e
    return decode(data, path)


def json_section(obj) -> np.ndarray:
    """JSON text stored byte-per-element in an int64 section."""
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype("<i8")


def read_json_section(arr: np.ndarray):
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
