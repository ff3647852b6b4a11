"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EBLC" | u32 version | u32 entry count
    entry*: u32 name length | name (utf-8) | u8 dtype code | u32 ndim | u64 shape[ndim] | data
    u32 meta length | meta (utf-8 JSON)
    u32 crc32 of every preceding byte

Float arrays are stored as little-endian f64. Integer arrays (counters,
lifetimes, provenance tags) are stored as little-endian i64 so they round
trip exactly.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import DenseNet, Layer

MAGIC = b"EBLC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _code(a: np.ndarray) -> int:
    if a.dtype.kind == "f":
        return 0
    if a.dtype.kind in "iub":
        return 1
    raise CheckpointError(f"cannot store arrays of dtype {a.dtype}")


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        code = _code(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<BI", code, a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), raw]
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(mb)), mb]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    off = 12
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BI", body, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
        off += size
    (m,) = struct.unpack_from("<I", body, off)
    meta = json.loads(body[off + 4:off + 4 + m].decode())
    return arrays, meta


def save_checkpoint(arrays: dict, meta: dict, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())


# --- networks ---------------------------------------------------------------

def pack_net(net: DenseNet, prefix: str) -> tuple[dict, list]:
    """Arrays ``{prefix}.p{i}`` plus a JSON-able description of the layers."""
    arrays = {f"{prefix}.p{i}": p for i, p in enumerate(net.params())}
    spec = [{"activation": l.activation, "slope": l.slope, "normalize": l.normalize} for l in net.layers]
    return arrays, spec


def unpack_net(arrays: dict, prefix: str, spec: list) -> DenseNet:
    layers = []
    for i, s in enumerate(spec):
        layers.append(Layer(arrays[f"{prefix}.p{2 * i}"], arrays[f"{prefix}.p{2 * i + 1}"],
                            activation=s["activation"], slope=s["slope"], normalize=s["normalize"]))
    return DenseNet(layers)
