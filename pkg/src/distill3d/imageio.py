"""Binary PPM (P6, 8-bit) images."""
from __future__ import annotations

import os
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]


def to_bytes(image) -> np.ndarray:
    """Clamp display values to [0, 1] and quantise to uint8."""
    a = np.asarray(image.detach().numpy() if hasattr(image, "detach") else image, dtype=np.float64)
    return np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image) -> bytes:
    a = to_bytes(image)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    h, w = a.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + a[..., :3].tobytes()


def write_ppm(path: PathLike, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def decode_ppm(data: bytes) -> np.ndarray:
    """Return a float64 (H, W, 3) image in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM (P6) image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM images are supported")
    pos += 1
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError("truncated PPM payload")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
