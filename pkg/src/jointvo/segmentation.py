"""Dynamicness probability maps and binary motion masks.

The geometric segmenter scores each correspondence by how badly it disagrees
with the current camera-motion estimate and squashes the residual ``r`` into
``p = 1 - exp(-(r / sigma_r)^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateMotion, DimensionMismatch, InvalidConfig
from .flow import FlowField
from .geometry import CameraIntrinsics, Motion, hat


@dataclass(frozen=True, eq=False)
class SegMask:
    """Binary mask, 1 = dynamic.  ``valid`` marks pixels the mask speaks for."""

    labels: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 2:
            raise DimensionMismatch("mask must be 2-D")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("mask labels must be 0 or 1")
        labels = labels.astype(np.uint8)
        valid = np.ones(labels.shape, bool) if self.valid is None else np.array(self.valid, bool)
        if valid.shape != labels.shape:
            raise DimensionMismatch("validity grid does not match mask")
        labels.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def empty(cls, h, w):
        return cls(np.zeros((h, w), np.uint8))

    @property
    def shape(self):
        return self.labels.shape

    def fraction(self, within=None):
        """Share of labelled pixels, optionally restricted to a boolean region."""
        region = self.valid if within is None else (np.asarray(within, bool) & self.valid)
        n = int(region.sum())
        return float(self.labels[region].sum()) / n if n else 0.0

    def __eq__(self, other):
        if not isinstance(other, SegMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(self.valid, other.valid)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    prob: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        prob = np.clip(np.array(self.prob, dtype=np.float64), 0.0, 1.0)
        if prob.ndim != 2:
            raise DimensionMismatch("probability map must be 2-D")
        valid = np.ones(prob.shape, bool) if self.valid is None else np.array(self.valid, bool)
        if valid.shape != prob.shape:
            raise DimensionMismatch("validity grid does not match probability map")
        prob[~valid] = 0.0
        prob.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "prob", prob)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.prob.shape


@dataclass(frozen=True)
class ThresholdSchedule:
    """Geometric decay ``max(z_min, z0 * gamma**(i - 1))``."""

    z0: float = 0.9
    gamma: float = 0.7
    z_min: float = 0.5

    def __post_init__(self):
        for name in ("z0", "gamma", "z_min"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1], got {val}")
        if self.z_min > self.z0:
            raise InvalidConfig("z_min must not exceed z0")


def threshold_for_iteration(schedule: ThresholdSchedule, i: int) -> float:
    if i < 1:
        raise InvalidConfig("iterations are numbered from 1")
    return max(schedule.z_min, schedule.z0 * schedule.gamma ** (i - 1))


def cow_mask(seed, h, w, fraction, sigma_range=(8.0, 32.0)) -> SegMask:
    """Locally connected random mask covering ``fraction`` of the grid.

    Gaussian noise is blurred with a log-uniformly drawn sigma and the
    ``round(fraction * h * w)`` largest responses are set.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidConfig(f"fraction must be in [0, 1], got {fraction}")
    lo, hi = sigma_range
    if not 0.0 < lo <= hi:
        raise InvalidConfig(f"bad sigma range {sigma_range}")
    rng = np.random.default_rng(seed)
    sigma = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    noise = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    k = int(round(fraction * h * w))
    flat = noise.ravel()
    labels = np.zeros(h * w, np.uint8)
    if k >= flat.size:
        labels[:] = 1
    elif k > 0:
        # k largest responses; ties at the cut resolve by raster order
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        above = flat > kth
        labels[above] = 1
        ties = np.flatnonzero(flat == kth)[: k - int(above.sum())]
        labels[ties] = 1
    return SegMask(labels.reshape(h, w))


def binarize(z: ProbabilityMap, z_threshold: float) -> SegMask:
    if not 0.0 < z_threshold <= 1.0:
        raise InvalidConfig(f"threshold must lie in (0, 1], got {z_threshold}")
    return SegMask(((z.prob >= z_threshold) & z.valid).astype(np.uint8), z.valid)


def residual_to_probability(r, sigma_r):
    r = np.asarray(r, dtype=float)
    return -np.expm1(-(r / sigma_r) ** 2)


@lru_cache(maxsize=8)
def pixel_grid(h, w):
    """``(h, w, 2)`` read-only array of pixel-center coordinates ``(u, v)``."""
    v, u = np.mgrid[0:h, 0:w]
    grid = np.stack([u, v], axis=-1).astype(float)
    grid.setflags(write=False)
    return grid


def sampson_distance(E, x1, x2):
    """Sampson distance of normalized correspondences ``x1 -> x2`` under ``x2^T E x1 = 0``.

    ``x1``, ``x2`` are ``(..., 2)``; returns the unsigned first-order geometric
    distance in normalized image units.
    """
    x1h = np.concatenate([x1, np.ones(x1.shape[:-1] + (1,))], axis=-1)
    x2h = np.concatenate([x2, np.ones(x2.shape[:-1] + (1,))], axis=-1)
    Ex1 = x1h @ E.T
    Etx2 = x2h @ E
    num = np.sum(x2h * Ex1, axis=-1)
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def essential_from_motion(motion: Motion):
    """``E = [t]x R`` for the point mapping ``X_{t+1} = R X_t + t``.

    ``motion`` is a camera motion (pose of the second camera in the first),
    hence the inversion.
    """
    inv = motion.inverse()
    return hat(inv.translation) @ inv.rotation.as_matrix()


def rigid_flow(motion: Motion, depth, K: CameraIntrinsics, valid=None):
    """Flow induced on a static scene of per-pixel ``depth`` by camera ``motion``.

    Returns ``(uv, ok)``; ``ok`` is False where depth is invalid or the point
    ends up behind the second camera.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, bool)
    grid = pixel_grid(h, w)
    Z = np.where(ok, depth, 1.0)
    X = np.stack([(grid[..., 0] - K.cx) / K.fx * Z, (grid[..., 1] - K.cy) / K.fy * Z, Z], axis=-1)
    Y = motion.inverse().apply(X.reshape(-1, 3)).reshape(h, w, 3)
    ok &= Y[..., 2] > 1e-9
    Yz = np.where(ok, Y[..., 2], 1.0)
    proj = np.stack([K.fx * Y[..., 0] / Yz + K.cx, K.fy * Y[..., 1] / Yz + K.cy], axis=-1)
    # reproject the source too, so a zero motion gives exactly zero flow
    src = np.stack([K.fx * X[..., 0] / Z + K.cx, K.fy * X[..., 1] / Z + K.cy], axis=-1)
    uv = np.where(ok[..., None], proj - src, 0.0)
    return uv, ok


def segment_residual(flow: FlowField, motion: Motion, K: CameraIntrinsics,
                     depth=None, sigma_r: float = 1.5, depth_valid=None) -> ProbabilityMap:
    """Dynamicness from the residual between observed flow and camera motion.

    With ``depth`` (metric motion required) the residual is the end-point
    distance to the rigid flow.  Without it, the residual is the Sampson
    distance to ``E = [t]x R`` converted to pixels with ``fx``; this path is
    blind to motion along epipolar lines and undefined for pure rotation.
    """
    if sigma_r <= 0:
        raise InvalidConfig("sigma_r must be positive")
    h, w = flow.shape
    if depth is not None:
        depth = np.asarray(depth, dtype=float)
        if depth.shape != (h, w):
            raise DimensionMismatch(f"depth {depth.shape} vs flow {flow.shape}")
        uv_rigid, ok = rigid_flow(motion, depth, K, depth_valid)
        valid = flow.valid & ok
        r = np.linalg.norm(flow.uv - uv_rigid, axis=-1)
    else:
        if np.linalg.norm(motion.translation) < 1e-9:
            raise DegenerateMotion("epipolar residual is undefined without translation")
        E = essential_from_motion(motion.normalized())
        grid = pixel_grid(h, w)
        x1 = K.normalize(grid)
        x2 = K.normalize(grid + flow.uv)
        r = sampson_distance(E, x1, x2) * K.fx
        valid = flow.valid
    p = np.where(valid, residual_to_probability(r, sigma_r), 0.0)
    return ProbabilityMap(p, valid)
