"""Tiny binary container for named float64 tensors.

Layout: 4 magic bytes, u32 LE header length, JSON header (names, shapes,
metadata), then each tensor row-major float64 little-endian in header
order. Used for model checkpoints and serialized worlds; byte-stable for
identical inputs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1


class TensorFileError(IOError):
    pass


def write_tensor_file(path: str, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    assert len(magic) == 4
    header = {
        "version": FORMAT_VERSION,
        "meta": meta,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_file(path: str, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != magic:
        raise TensorFileError(f"{path}: bad {magic.decode('ascii', 'replace')} file (magic mismatch)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise TensorFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported version {header.get('version')!r}")
    tensors: dict[str, np.ndarray] = {}
    offset = header_end
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise TensorFileError(f"{path}: truncated tensor {name!r}")
        flat = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8")
        tensors[name] = flat.reshape(shape).astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(blob):
        raise TensorFileError(f"{path}: {len(blob) - offset} trailing bytes")
    return header["meta"], tensors
