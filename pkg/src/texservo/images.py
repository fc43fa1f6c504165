"""Grayscale image helpers: binary PGM (P5) I/O, quantization, SSD."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def to_uint8(img):
    """Clamp a float image in [0, 1] to 8-bit gray."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img):
    return np.asarray(img, dtype=np.float64) / 255.0


def write_pgm(path, img):
    """Binary PGM, maxval 255.  Accepts float [0,1] or uint8 input."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 2:
        raise ShapeError(f"PGM writer expects a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path):
    """Returns a float image in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields, i = [], 2
    while len(fields) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while raw[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        fields.append(int(raw[i:j]))
        i = j
    w, h, maxval = fields
    i += 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i)
    return pixels.reshape(h, w).astype(np.float64) / float(maxval)


def ssd(a, b, include=None):
    """Sum of squared per-pixel differences, over the full frame or over an
    optional boolean include-mask of the same shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"SSD shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    if include is not None:
        if include.shape != a.shape:
            raise ShapeError(
                f"SSD mask shape {include.shape} differs from {a.shape}")
        d = d[include]
    return float(np.sum(d * d))
