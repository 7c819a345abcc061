"""Dense optical flow container, masking, block downsampling and Middlebury I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimensionMismatch, NotDivisible, TruncatedFile

FLO_MAGIC = b"PIEH"
# Middlebury readers treat |value| >= 1e9 as unknown flow
FLO_UNKNOWN = 1e9


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``uv[v, u] = (du, dv)`` in this grid's pixels.

    Invalid pixels hold ``(0, 0)`` and a cleared ``valid`` bit.
    """

    uv: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        uv = np.array(self.uv, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if uv.ndim != 3 or uv.shape[2] != 2 or uv.shape[0] < 1 or uv.shape[1] < 1:
            raise DimensionMismatch(f"flow must be (h, w, 2), got {uv.shape}")
        if valid.shape != uv.shape[:2]:
            raise DimensionMismatch("validity grid does not match flow")
        uv[~valid] = 0.0
        if not np.all(np.isfinite(uv)):
            raise ValueError("flow must be finite on valid pixels")
        uv.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def dense(cls, uv):
        uv = np.asarray(uv, dtype=float)
        return cls(uv, np.ones(uv.shape[:2], dtype=bool))

    @classmethod
    def zeros(cls, h, w):
        return cls.dense(np.zeros((h, w, 2)))

    @property
    def shape(self):
        return self.uv.shape[:2]

    @property
    def h(self):
        return self.uv.shape[0]

    @property
    def w(self):
        return self.uv.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.uv, other.uv) and np.array_equal(self.valid, other.valid)

    __hash__ = None


def mask_flow(flow: FlowField, mask) -> FlowField:
    """Zero the flow wherever ``mask`` is 1; validity is left untouched."""
    labels = np.asarray(getattr(mask, "labels", mask))
    if labels.shape != flow.shape:
        raise DimensionMismatch(f"mask {labels.shape} vs flow {flow.shape}")
    uv = flow.uv.copy()
    uv[labels.astype(bool)] = 0.0
    return FlowField(uv, flow.valid)


def downsample_flow(flow: FlowField, factor: int = 4) -> FlowField:
    """Average valid flow over ``factor x factor`` blocks and rescale to the coarse grid."""
    h, w = flow.shape
    if h % factor or w % factor:
        raise NotDivisible(f"{h}x{w} flow is not divisible by {factor}")
    hb, wb = h // factor, w // factor
    valid = flow.valid.reshape(hb, factor, wb, factor)
    uv = flow.uv.reshape(hb, factor, wb, factor, 2)
    count = valid.sum(axis=(1, 3))
    total = uv.sum(axis=(1, 3))  # invalid pixels already hold zeros
    out_valid = count > 0
    mean = np.zeros((hb, wb, 2))
    mean[out_valid] = total[out_valid] / count[out_valid, None]
    return FlowField(mean / factor, out_valid)


def write_flo(path, flow: FlowField) -> None:
    """Write a Middlebury ``.flo`` file; invalid pixels become the 1e9 sentinel.

    Values are stored as float32, so only float32-representable flow survives
    a round trip bit for bit.
    """
    data = flow.uv.astype("<f4")
    data[~flow.valid] = FLO_UNKNOWN
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", flow.w, flow.h))
        fh.write(data.tobytes(order="C"))


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise BadMagic(f"{path}: not a .flo file (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header truncated")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1:
        raise TruncatedFile(f"{path}: invalid dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(raw)}")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    valid = np.all(np.abs(uv) < FLO_UNKNOWN, axis=2)
    return FlowField(uv.astype(np.float64), valid)
