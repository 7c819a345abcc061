"""Binary (P5) PGM read/write for depth maps, masks and probability maps."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ParseError, TruncatedFile

DEPTH_SCALE = 1000.0  # 16-bit depth PGMs store millimetres, 0 = invalid


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    maxval = 255 if img.dtype == np.uint8 else 65535
    if img.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"PGM expects uint8 or uint16, got {img.dtype}")
    h, w = img.shape
    body = img.astype(">u2").tobytes() if maxval > 255 else img.tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(body)


_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path):
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise ParseError("not a binary PGM file", line=1, path=path)
    w, h, maxval = (int(g) for g in m.groups())
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    body = raw[m.end():]
    if len(body) < n:
        raise TruncatedFile(f"{path}: expected {n} pixel bytes, got {len(body)}")
    img = np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def encode_depth(depth, valid):
    mm = np.rint(np.where(valid, depth, 0.0) * DEPTH_SCALE)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def decode_depth(img):
    img = np.asarray(img)
    return img.astype(float) / DEPTH_SCALE, img > 0


def encode_mask(mask):
    """Mask to 8-bit: 255 = dynamic, 0 = static or invalid."""
    return (np.asarray(mask.labels) * 255).astype(np.uint8)


def encode_probability(z):
    return np.rint(np.asarray(z.prob) * 255).astype(np.uint8)
