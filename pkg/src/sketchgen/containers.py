"""Binary container files: a JSON manifest plus raw float blocks.

Used for trajectory and attention-stack caching and interchange. Layout:

    magic "SGC1" | u32le manifest length | manifest JSON (UTF-8) | blocks

The manifest lists every block's name, shape, and dtype; blocks are raw
little-endian floats concatenated in manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SGC1"
_DTYPES = {"<f4", "<f8"}


class ContainerError(RuntimeError):
    """Raised for malformed, truncated, or unsupported container files."""


@dataclass
class Container:
    kind: str
    meta: dict
    blocks: dict[str, np.ndarray] = field(default_factory=dict)


def write_container(
    path: str | Path,
    kind: str,
    blocks: list[tuple[str, np.ndarray]],
    meta: dict | None = None,
    dtype: str = "<f4",
) -> None:
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported block dtype {dtype!r}, want one of {sorted(_DTYPES)}")
    names = [name for name, _ in blocks]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate block names")
    manifest = {
        "kind": kind,
        "dtype": dtype,
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
        "meta": meta or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())


def read_container(path: str | Path) -> Container:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    (mlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + mlen:
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: manifest is not valid JSON: {exc}") from exc
    dtype = manifest.get("dtype")
    if dtype not in _DTYPES:
        raise ContainerError(f"{path}: unsupported dtype {dtype!r}")
    itemsize = np.dtype(dtype).itemsize
    out = Container(kind=manifest.get("kind", ""), meta=manifest.get("meta", {}))
    offset = 8 + mlen
    for spec in manifest.get("blocks", []):
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = int(np.prod(shape)) * itemsize if shape else itemsize
        chunk = data[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise ContainerError(f"{path}: truncated block {spec['name']!r}")
        out.blocks[spec["name"]] = np.frombuffer(chunk, dtype=np.dtype(dtype)).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes after last block")
    return out
