"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit, dependency-free.

The byte-to-float mapping is fixed: stored value v becomes v/255, so an
8-bit image round-trips load -> save -> load bitwise.
"""

from __future__ import annotations

import numpy as np

__all__ = ["load_pnm", "save_pnm"]

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


def _read_token(blob, pos):
    """Next whitespace-delimited ASCII token, skipping '#' comment lines."""
    n = len(blob)
    while pos < n:
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated header")
    return blob[start:pos], pos


def load_pnm(path):
    """Read a binary PGM/PPM file into a (C,H,W) float array in [0,1]."""
    with open(path, "rb") as f:
        blob = f.read()
    magic = blob[:2]
    if magic not in _MAGIC_CHANNELS:
        raise ValueError(
            f"{path}: not a binary PGM/PPM file (magic bytes {magic!r}, expected P5 or P6)"
        )
    channels = _MAGIC_CHANNELS[magic]
    pos = 2
    try:
        width_tok, pos = _read_token(blob, pos)
        height_tok, pos = _read_token(blob, pos)
        maxval_tok, pos = _read_token(blob, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError as e:
        raise ValueError(f"{path}: malformed header ({e})") from None
    if width <= 0 or height <= 0:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    trailing = blob[pos + need :]
    if trailing.strip():
        raise ValueError(f"{path}: {len(trailing)} unexpected bytes after pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return pixels.reshape(1, height, width)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1)


def save_pnm(path, image):
    """Write a (C,H,W) or (H,W) float image in [0,1] as 8-bit PGM/PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (H,W) or (C,H,W) with 1 or 3 channels, got {arr.shape}")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    channels, height, width = data.shape
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    if channels == 1:
        payload = data[0].tobytes()
    else:
        payload = data.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)
