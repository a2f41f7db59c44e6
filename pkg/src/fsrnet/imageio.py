"""Binary PPM (P6) / PGM (P5) with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """``img`` is uint8 [3, H, W]."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects uint8 [3,H,W], got {img.dtype} {img.shape}")
    _, h, w = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"write_pgm expects uint8 [H,W], got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def _read_netpbm(path: str | Path, magic: bytes):
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos + 1), h, w


def read_ppm(path: str | Path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P6")
    return raw[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P5")
    return raw[: h * w].reshape(h, w).copy()
