"""Trajectories, similarity alignment, absolute trajectory error and TUM/KITTI files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateSpread, EmptyTrajectory, ParseError
from .geometry import Motion, Rotation

FLAG_SUBSTITUTED = 1   # pair failed, identity step inserted


@dataclass(frozen=True, eq=False)
class Trajectory:
    """World-from-camera poses with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: list
    flags: np.ndarray = None

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        poses = list(self.poses)
        if not poses:
            raise EmptyTrajectory("trajectory has no poses")
        if len(ts) != len(poses):
            raise ValueError(f"{len(ts)} timestamps for {len(poses)} poses")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if any(p.up_to_scale for p in poses):
            raise ValueError("trajectory poses must be metric")
        flags = np.zeros(len(poses), np.int64) if self.flags is None else np.array(self.flags, np.int64)
        if flags.shape != (len(poses),):
            raise ValueError("one flag per pose")
        ts.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, s, R, T):
        """Apply ``p -> s R p + T`` to positions and ``R`` to orientations."""
        rot = Rotation.from_matrix(R)
        poses = [Motion(rot * p.rotation, s * (R @ p.translation) + T) for p in self.poses]
        return Trajectory(self.timestamps, poses, self.flags)


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale: bool = True):
    """Least-squares ``(s, R, T)`` minimising ``sum |gt_i - (s R est_i + T)|^2``."""
    X = est.positions
    Y = gt.positions
    if len(X) != len(Y):
        raise ValueError(f"trajectory lengths differ: {len(X)} vs {len(Y)}")
    if len(X) < 3:
        raise DegenerateSpread("alignment needs at least three poses")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateSpread("estimated positions are collinear or coincident")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = np.sum(Xc ** 2) / len(X)
        s = float(np.sum(D * np.diag(S)) / var_x)
    else:
        s = 1.0
    T = my - s * R @ mx
    return s, R, T


def ate_rmse(est: Trajectory, gt: Trajectory, with_scale: bool = True, align: bool = True) -> float:
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    X = est.positions
    if align:
        s, R, T = umeyama_align(est, gt, with_scale)
        X = s * X @ R.T + T
    err = gt.positions - X
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


# -------------------------------------------------------------- file formats

def _fmt(x):
    # repr gives the shortest string that round-trips exactly
    return repr(float(x))


def write_trajectory(path, traj: Trajectory, fmt: str = "tum") -> None:
    fmt = fmt.lower()
    lines = []
    for ts, pose in zip(traj.timestamps, traj.poses):
        if fmt == "tum":
            w, x, y, z = pose.rotation.quat
            vals = [ts, *pose.translation, x, y, z, w]
        elif fmt == "kitti":
            vals = pose.as_matrix()[:3].reshape(-1)
        else:
            raise ValueError(f"unknown trajectory format {fmt!r}")
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="ascii")


def _floats(parts, n, lineno, path):
    if len(parts) != n:
        raise ParseError(f"expected {n} values, got {len(parts)}", line=lineno, path=path)
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as err:
        raise ParseError(str(err), line=lineno, path=path) from None
    if not np.all(np.isfinite(vals)):
        raise ParseError("non-finite value", line=lineno, path=path)
    return vals


def read_trajectory(path, fmt: str = "tum") -> Trajectory:
    """Parse a TUM or KITTI file.  KITTI poses get their line index as timestamp."""
    fmt = fmt.lower()
    if fmt not in ("tum", "kitti"):
        raise ValueError(f"unknown trajectory format {fmt!r}")
    text = Path(path).read_text(encoding="ascii", errors="replace")
    stamps, poses = [], []
    last_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        last_line = lineno
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if fmt == "tum":
            v = _floats(parts, 8, lineno, path)
            try:
                rot = Rotation(np.array([v[7], v[4], v[5], v[6]]))
            except ValueError as err:
                raise ParseError(str(err), line=lineno, path=path) from None
            stamp, pose = v[0], Motion(rot, v[1:4])
        else:
            v = _floats(parts, 12, lineno, path)
            M = v.reshape(3, 4)
            if abs(np.linalg.det(M[:, :3]) - 1.0) > 1e-3:
                raise ParseError("rotation block is not a rotation", line=lineno, path=path)
            stamp, pose = float(len(poses)), Motion(Rotation.from_matrix(M[:, :3]), M[:, 3])
        if stamps and stamp <= stamps[-1]:
            raise ParseError("timestamps must be strictly increasing", line=lineno, path=path)
        stamps.append(stamp)
        poses.append(pose)
    if not poses:
        raise ParseError("no poses found", line=last_line + 1, path=path)
    return Trajectory(stamps, poses)
