"""Small binary file helpers: grayscale PNGs and raw float32 maps.

Raw maps are a 16-byte header (4-byte magic, uint32 height, uint32 width,
4 zero bytes, all little-endian) followed by row-major float32 samples.
The depth-map magic is LFDM; normalized coded images use LFCI.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"LFDM"
CODED_MAGIC = b"LFCI"

_HEADER = struct.Struct("<4sII4x")


class FileFormatError(Exception):
    pass


def write_gray_png(path: str, arr: np.ndarray, bit_depth: int = 16) -> None:
    data = encode_gray_png(arr, bit_depth)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def encode_gray_png(arr: np.ndarray, bit_depth: int = 16) -> bytes:
    if bit_depth == 16:
        img = Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint16))
    elif bit_depth == 8:
        img = Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8))
    else:
        raise FileFormatError(f"unsupported bit depth {bit_depth}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def read_gray_png(path: str) -> tuple[np.ndarray, int]:
    """Returns (integer samples, file bit depth)."""
    with Image.open(path) as img:
        mode = img.mode
        arr = np.array(img)
    if mode == "L":
        return arr.astype(np.uint16), 8
    if mode in ("I", "I;16"):
        return arr.astype(np.uint16), 16
    raise FileFormatError(f"{path}: unsupported PNG mode {mode!r}")


def encode_unit_png16(img01: np.ndarray) -> bytes:
    """[H,W] floats in [0,1] -> deterministic 16-bit grayscale PNG bytes."""
    q = np.round(np.clip(img01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return encode_gray_png(q, 16)


def write_unit_png16(path: str, img01: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_unit_png16(img01))


def write_f32_map(path: str, arr: np.ndarray, magic: bytes) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise FileFormatError(f"f32 map must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_f32_map(path: str, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FileFormatError(f"{path}: truncated header")
        got_magic, h, w = _HEADER.unpack(header)
        if got_magic != magic:
            raise FileFormatError(f"{path}: magic {got_magic!r} != expected {magic!r}")
        payload = f.read(h * w * 4)
    if len(payload) != h * w * 4:
        raise FileFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
