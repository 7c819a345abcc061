"""Rigid-motion algebra and the pinhole camera model.

Conventions used throughout the package:

* Quaternions are stored ``(w, x, y, z)`` with ``w >= 0``.
* A :class:`Motion` maps points ``p -> R p + t``.  A frame-to-frame camera
  motion is the pose of camera ``t+1`` expressed in camera ``t`` coordinates,
  so trajectories accumulate as ``pose_{t+1} = compose(pose_t, motion)``.
* Integer pixel coordinates address pixel centers; ``u`` is the column and
  ``v`` the row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, CropOutOfBounds, InvalidConfig, UpToScaleComposition

_EPS_DEPTH = 1e-9


def hat(v):
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _canonical(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and nonzero")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``, canonical sign ``w >= 0``."""

    quat: np.ndarray

    def __post_init__(self):
        q = _canonical(self.quat)
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, rotvec):
        r = np.asarray(rotvec, dtype=float).reshape(3)
        angle = np.linalg.norm(r)
        if angle < 1e-8:
            # second-order Taylor expansion of sin(angle/2)/angle
            s = 0.5 - angle * angle / 48.0
        else:
            s = np.sin(0.5 * angle) / angle
        return cls(np.concatenate([[np.cos(0.5 * angle)], s * r]))

    @classmethod
    def from_matrix(cls, R):
        R = np.asarray(R, dtype=float)
        # Shepperd's method: pivot on the largest diagonal term
        tr = np.trace(R)
        d = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
        k = int(np.argmax(d))
        if k == 0:
            w = 0.5 * np.sqrt(1.0 + tr)
            q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w),
                 (R[1, 0] - R[0, 1]) / (4 * w)]
        elif k == 1:
            x = 0.5 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x),
                 (R[0, 2] + R[2, 0]) / (4 * x)]
        elif k == 2:
            y = 0.5 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y,
                 (R[1, 2] + R[2, 1]) / (4 * y)]
        else:
            z = 0.5 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
            q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z),
                 (R[1, 2] + R[2, 1]) / (4 * z), z]
        return cls(np.array(q))

    def as_matrix(self):
        w, x, y, z = self.quat
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def as_rotvec(self):
        """Axis-angle vector with angle in ``[0, pi]``."""
        w = self.quat[0]
        v = self.quat[1:]
        s = np.linalg.norm(v)
        angle = 2.0 * np.arctan2(s, w)
        if s < 1e-12:
            return 2.0 * v / w
        return v * (angle / s)

    def angle(self):
        return 2.0 * np.arctan2(np.linalg.norm(self.quat[1:]), abs(self.quat[0]))

    def inverse(self):
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other):
        return Rotation(_quat_mul(self.quat, other.quat))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.as_matrix().T

    def __repr__(self):
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


def geodesic_angle(a: Rotation, b: Rotation) -> float:
    """Angle in ``[0, pi]`` of the relative rotation ``a^-1 b``."""
    rel = _quat_mul(a.inverse().quat, b.quat)
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


@dataclass(frozen=True, eq=False)
class Motion:
    """Rigid motion ``p -> R p + t``.

    ``up_to_scale`` motions carry only a translation direction; they cannot
    be composed.
    """

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up_to_scale: bool = False

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if self.up_to_scale:
            n = np.linalg.norm(t)
            if n > 0.0:
                t = t / n
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T, up_to_scale=False):
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3], up_to_scale)

    @classmethod
    def from_rotvec(cls, rotvec, translation, up_to_scale=False):
        return cls(Rotation.from_rotvec(rotvec), translation, up_to_scale)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.as_matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        r_inv = self.rotation.inverse()
        return Motion(r_inv, -r_inv.apply(self.translation), self.up_to_scale)

    def apply(self, points):
        return self.rotation.apply(points) + self.translation

    def normalized(self):
        return Motion(self.rotation, self.translation, up_to_scale=True)

    def scaled(self, s):
        """Metric motion with the translation direction stretched to length ``s``."""
        return Motion(self.rotation, np.asarray(self.translation) * s, up_to_scale=False)

    def __repr__(self):
        return (f"Motion(rotvec={np.array2string(self.rotation.as_rotvec(), precision=6)}, "
                f"t={np.array2string(self.translation, precision=6)}, "
                f"up_to_scale={self.up_to_scale})")


def compose(a: Motion, b: Motion) -> Motion:
    """``a o b``: apply ``b`` first, then ``a``."""
    if a.up_to_scale or b.up_to_scale:
        raise UpToScaleComposition("cannot compose up-to-scale motions")
    return Motion(a.rotation * b.rotation, a.rotation.apply(b.translation) + a.translation)


def invert(m: Motion) -> Motion:
    return m.inverse()


def translation_angle(a, b) -> float:
    """Angle between two translation directions; 0 if either is zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    # atan2 form stays accurate for nearly parallel vectors
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidConfig("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidConfig("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, pixels):
        """Pixel coordinates ``(..., 2)`` to normalized image coordinates."""
        p = np.asarray(pixels, dtype=float)
        return np.stack([(p[..., 0] - self.cx) / self.fx, (p[..., 1] - self.cy) / self.fy], axis=-1)

    def downscaled(self, factor):
        """Intrinsics of the grid obtained by averaging ``factor x factor`` blocks.

        Pixel-center convention: native coordinate ``u`` lands at
        ``(u + 0.5) / factor - 0.5`` on the coarse grid.
        """
        if self.width % factor or self.height % factor:
            raise InvalidConfig(f"image size not divisible by {factor}")
        return CameraIntrinsics(
            self.fx / factor, self.fy / factor,
            (self.cx + 0.5) / factor - 0.5, (self.cy + 0.5) / factor - 0.5,
            self.width // factor, self.height // factor,
        )

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def project(point, K: CameraIntrinsics):
    """Pinhole projection of one point or an ``(N, 3)`` array."""
    p = np.asarray(point, dtype=float)
    Z = p[..., 2]
    if np.any(Z <= _EPS_DEPTH):
        raise BehindCamera("point depth must exceed 1e-9")
    return np.stack([K.fx * p[..., 0] / Z + K.cx, K.fy * p[..., 1] / Z + K.cy], axis=-1)


def unproject(pixel, depth, K: CameraIntrinsics):
    """Inverse of :func:`project` given the depth ``Z`` of each pixel."""
    px = np.asarray(pixel, dtype=float)
    Z = np.asarray(depth, dtype=float)
    x = (px[..., 0] - K.cx) / K.fx * Z
    y = (px[..., 1] - K.cy) / K.fy * Z
    return np.stack([x, y, np.broadcast_to(Z, x.shape)], axis=-1)


def make_intrinsics_layer(K: CameraIntrinsics, h: int, w: int):
    """Normalized-coordinate grid of shape ``(2, h, w)``.

    Each cell samples the native-resolution pixel at its center, so the layer
    can be built at any resolution (typically a quarter of the native one).
    """
    if h < 1 or w < 1:
        raise InvalidConfig("grid must be at least 1x1")
    u = (np.arange(w) + 0.5) * (K.width / w) - 0.5
    v = (np.arange(h) + 0.5) * (K.height / h) - 0.5
    layer = np.empty((2, h, w))
    layer[0] = ((u - K.cx) / K.fx)[None, :]
    layer[1] = ((v - K.cy) / K.fy)[:, None]
    return layer


def rcr_adjust(K: CameraIntrinsics, crop, out_size) -> CameraIntrinsics:
    """Intrinsics after cropping ``crop = (x0, y0, w, h)`` and resizing to ``out_size = (w, h)``."""
    x0, y0, cw, ch = crop
    ow, oh = out_size
    if ow < 1 or oh < 1:
        raise InvalidConfig("output size must be at least 1x1")
    if x0 < 0 or y0 < 0 or cw < 1 or ch < 1 or x0 + cw > K.width or y0 + ch > K.height:
        raise CropOutOfBounds(f"crop {tuple(crop)} exceeds image {K.width}x{K.height}")
    sx = ow / cw
    sy = oh / ch
    return CameraIntrinsics(K.fx * sx, K.fy * sy, (K.cx - x0) * sx, (K.cy - y0) * sy, ow, oh)
