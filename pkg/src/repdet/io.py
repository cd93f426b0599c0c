"""Small file helpers: atomic writes and binary PPM (P6) images."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _ppm_tokens(data: bytes, count: int):
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as an ``(H, W, 3)`` uint8 array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), start = _ppm_tokens(data, 4)
    if magic != b"P6":
        raise ValueError("only binary P6 PPM images are supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError("only 8-bit PPM (maxval 255) is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=start)
    return raster.reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + image.tobytes())
