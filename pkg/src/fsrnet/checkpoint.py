"""FSRT checkpoint files.

Layout (little-endian)::

    b"FSRT" | u32 version | 32-byte config fingerprint | u32 count
    count x ( u32 name_len | name utf-8 | u8 rank | rank x u32 dim | float32 payload )
    u32 meta_len | meta_len bytes of JSON   (run config, code version, step, ...)

The trailing JSON block is optional for readers that only need the tensors.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .nets import ConfigError, ModelParams

MAGIC = b"FSRT"
VERSION = 1


def _write_records(buf, fingerprint: str, arrays: dict[str, np.ndarray], meta: dict | None):
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    fp = bytes.fromhex(fingerprint)
    if len(fp) != 32:
        raise ValueError("fingerprint must be a sha256 hex digest")
    buf.write(fp)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        arr = np.asarray(arr)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)


def save_arrays(path: str | Path, fingerprint: str, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    buf = io.BytesIO()
    _write_records(buf, fingerprint, arrays, meta)
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: not an FSRT checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = data[8:40].hex()
    (count,) = struct.unpack_from("<I", data, 40)
    pos = 44
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rank = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    meta = {}
    if pos + 4 <= len(data):
        (m,) = struct.unpack_from("<I", data, pos)
        meta = json.loads(data[pos + 4:pos + 4 + m].decode("utf-8"))
    return fingerprint, arrays, meta


def save_params(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    save_arrays(path, params.fingerprint, params.state(), meta)


def load_params(path: str | Path, params: ModelParams) -> dict:
    """Load into ``params`` in place; the fingerprint must match. Returns the metadata."""
    fingerprint, arrays, meta = load_arrays(path)
    if fingerprint != params.fingerprint:
        raise ConfigError(f"{path}: architecture fingerprint {fingerprint[:12]} does not match "
                          f"the configured model {params.fingerprint[:12]}")
    params.load_state(arrays)
    return meta


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
