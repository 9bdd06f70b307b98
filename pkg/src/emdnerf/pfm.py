"""Portable float map (PFM) I/O.

Grayscale only (``Pf``). Files are written little-endian (negative scale) with
rows stored bottom-to-top as the format requires; arrays are returned
top-to-bottom.
"""

from pathlib import Path

import numpy as np

from .errors import DataError


def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DataError(f"PFM writer expects a 2-D map, got shape {image.shape}")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(np.flipud(image)).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise DataError(f"{path} is not a PFM file")
    channels = 3 if parts[0].strip() == b"PF" else 1
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    data = np.frombuffer(parts[3], dtype=dtype, count=count) if len(parts[3]) >= 4 * count else None
    if data is None:
        raise DataError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)
