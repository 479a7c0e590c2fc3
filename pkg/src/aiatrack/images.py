"""Binary portable graymap / pixmap output."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray, normalize: bool = False) -> bytes:
    """Encode a 2-D (gray) or ``(H, W, 3)`` array in ``[0, 1]`` as binary PGM/PPM."""
    a = np.asarray(img, dtype=np.float64)
    if normalize:
        lo, hi = float(a.min()), float(a.max())
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    pix = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write(path, img: np.ndarray, normalize: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(img, normalize))
    return path


def read(path) -> np.ndarray:
    """Read back a file produced by :func:`write` (8-bit, no comments)."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval, data = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    channels = {b"P5": 1, b"P6": 3}[magic]
    arr = np.frombuffer(data[: w * h * channels], dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def draw_box(img: np.ndarray, box, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Copy of ``img`` with a one-pixel rectangle outline."""
    out = np.array(img, dtype=np.float64, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    h, w = out.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, x1 = max(min(x0, w - 1), 0), max(min(x1 - 1, w - 1), 0)
    y0, y1 = max(min(y0, h - 1), 0), max(min(y1 - 1, h - 1), 0)
    out[y0, x0:x1 + 1] = color
    out[y1, x0:x1 + 1] = color
    out[y0:y1 + 1, x0] = color
    out[y0:y1 + 1, x1] = color
    return out
