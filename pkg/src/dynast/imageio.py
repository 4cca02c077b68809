"""Binary PPM (P6) / PGM (P5) readers and writers; bit-exact, zero-dependency."""

from __future__ import annotations

import numpy as np


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, arr: np.ndarray):
    """arr: [3, H, W] floats in [0, 1]."""
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3, H, W], got {arr.shape}")
    _, h, w = arr.shape
    payload = _quantize(arr).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def write_pgm(path, arr: np.ndarray):
    """arr: [H, W] or [1, H, W] floats in [0, 1]."""
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"write_pgm expects one channel, got {arr.shape}")
        arr = arr[0]
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(arr).tobytes())


def _read_header(fh):
    fields = []
    while len(fields) < 4:
        line = fh.readline()
        if not line:
            raise ValueError("truncated image header")
        stripped = line.split(b"#", 1)[0]
        fields.extend(stripped.split())
    magic, w, h, maxval = fields[:4]
    return magic.decode("ascii"), int(w), int(h), int(maxval)


def read_image(path) -> np.ndarray:
    """Read P5 -> [1, H, W] or P6 -> [3, H, W], values scaled into [0, 1]."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header(fh)
        if maxval != 255:
            raise ValueError(f"only 8-bit images supported, maxval={maxval}")
        if magic == "P5":
            raw = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(1, h, w)
        elif magic == "P6":
            raw = np.frombuffer(fh.read(3 * w * h), dtype=np.uint8).reshape(h, w, 3)
            raw = raw.transpose(2, 0, 1)
        else:
            raise ValueError(f"unsupported image magic {magic!r}")
    return raw.astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    img = read_image(path)
    if img.shape[0] != 3:
        raise ValueError(f"{path} is not a color image")
    return img


def read_pgm(path) -> np.ndarray:
    img = read_image(path)
    if img.shape[0] != 1:
        raise ValueError(f"{path} is not a grayscale image")
    return img
