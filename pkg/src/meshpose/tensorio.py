"""Binary tensor and graymap file formats.

Tensors go to disk as little-endian float32 with a fixed 16-byte header:
the magic ``NMT1`` followed by three uint32 dimensions (row-major data,
trailing dimensions padded to 1 for arrays with fewer than three axes).
Masks and occlusion maps use binary PGM (P5) with maxval 255.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = b"NMT1"


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a 1-, 2- or 3-dimensional array as an NMT1 file."""
    array = np.asarray(array)
    if array.ndim == 0 or array.ndim > 3:
        raise ValueError(f"tensor files hold 1..3 dimensions, got {array.ndim}")
    dims = list(array.shape) + [1] * (3 - array.ndim)
    data = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        fh.write(data.tobytes())


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read an NMT1 file; always returns a 3-d float32 array.

    Trailing padded dimensions are kept (shape as stored); callers reshape
    to their natural rank.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    dims = np.frombuffer(raw, dtype="<u4", count=3, offset=4)
    count = int(dims[0]) * int(dims[1]) * int(dims[2])
    expected = 16 + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header "
                         f"dims {tuple(int(d) for d in dims)} ({expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=16)
    return data.reshape(tuple(int(d) for d in dims)).copy()


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a uint8 graymap as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"graymaps are 2-d, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"graymaps are uint8, got {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    # Header: magic, width, height, maxval -- whitespace separated, then one
    # whitespace byte before the raster.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()
