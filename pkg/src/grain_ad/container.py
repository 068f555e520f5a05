"""Versioned binary container used by weight files and model files.

Layout (all integers little-endian)::

    magic        4 bytes   b"GADW" (extractor weights) or b"GADM" (model)
    version      uint32    currently 1
    header_len   uint32    byte length of the JSON header
    header       UTF-8 JSON, keys sorted, no insignificant whitespace;
                 ``header["arrays"]`` lists ``{"name", "shape"}`` in payload order
    payload      each array as row-major float32 little-endian, concatenated

Writing the same header and arrays always yields the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from grain_ad.errors import ModelLoadError

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def dump(magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype=_F32).tobytes() for _, a in arrays]
    return b"".join(parts)


def load(data: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:4] != magic:
        raise ModelLoadError(f"{source}: bad magic, expected {magic!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"{source}: unsupported format version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise ModelLoadError(f"{source}: corrupt header") from exc
    offset = 12 + hlen
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise ModelLoadError(f"{source}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=_F32, count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise ModelLoadError(f"{source}: {len(data) - offset} trailing bytes")
    return header, arrays


def write_file(path: str | Path, magic: bytes, header: dict, arrays) -> None:
    Path(path).write_bytes(dump(magic, header, arrays))


def read_file(path: str | Path, magic: bytes):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ModelLoadError(f"cannot read {path}: {exc}") from exc
    return load(data, magic, str(path))
