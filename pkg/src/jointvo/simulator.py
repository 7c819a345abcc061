"""Deterministic synthetic dynamic scenes with exact flow, depth and motion labels.

A scene is a set of point clouds: a bumpy backdrop and a few tilted panels
that stay put, plus rigid boxes that move.  Rendering splats each point into one pixel
with a z-buffer, so flow and depth exist only on covered pixels.

Each splatted point is moved onto its pixel-center ray at its own depth
before being carried to the next frame.  Flow read at integer pixel
coordinates is then an exact correspondence, and static pixels satisfy the
epipolar constraint to machine precision.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .errors import DimensionMismatch, FrameOutOfRange, InvalidConfig
from .flow import FlowField
from .geometry import CameraIntrinsics, Motion, Rotation, compose
from .segmentation import SegMask, pixel_grid

NEAR_PLANE = 0.1
DEFAULT_TAU = 0.05
# relative depth gap beyond which a surface counts as hiding itself
OCCLUSION_TOLERANCE = 0.03
# bilinear depth lookups spanning a larger relative spread are rejected
DISCONTINUITY_TOLERANCE = 0.01


@dataclass(frozen=True)
class MotionMagnitudes:
    camera_step: float = 0.25        # scene units per frame
    camera_rotation_deg: float = 1.0
    body_step: tuple = (0.25, 0.4)   # scene units per frame
    body_rotation_deg: float = 2.0


@dataclass(frozen=True)
class SceneConfig:
    n_static: int = 6                # static panels in front of the backdrop
    n_bodies: int = 3
    dynamic_fraction_target: float = 0.3
    motion_magnitudes: MotionMagnitudes = field(default_factory=MotionMagnitudes)
    frames: int = 2
    width: int = 160
    height: int = 120
    focal: float = 120.0
    scene_depth: float = 6.0         # backdrop distance; everything else scales with it

    def __post_init__(self):
        if isinstance(self.motion_magnitudes, dict):
            mags = dict(self.motion_magnitudes)
            if "body_step" in mags:
                mags["body_step"] = tuple(mags["body_step"])
            object.__setattr__(self, "motion_magnitudes", MotionMagnitudes(**mags))
        mm = self.motion_magnitudes
        if self.n_static < 0 or self.n_bodies < 0:
            raise InvalidConfig("object counts must be non-negative")
        if not 0.0 <= self.dynamic_fraction_target <= 1.0:
            raise InvalidConfig("dynamic_fraction_target must lie in [0, 1]")
        if self.frames < 2:
            raise InvalidConfig("a scene needs at least two frames")
        if self.width < 2 or self.height < 2 or self.focal <= 0:
            raise InvalidConfig("bad camera geometry")
        lo, hi = mm.body_step
        if mm.camera_step < 0 or mm.camera_rotation_deg < 0 or not 0 <= lo <= hi \
                or mm.body_rotation_deg < 0:
            raise InvalidConfig("motion magnitudes must be non-negative with lo <= hi")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0, self.width, self.height)

    def to_dict(self):
        d = asdict(self)
        d["motion_magnitudes"]["body_step"] = list(self.motion_magnitudes.body_step)
        return d


@dataclass(frozen=True, eq=False)
class RigidBody:
    """Points in body coordinates plus one body-to-world pose per frame."""

    points: np.ndarray
    poses: List[Motion]

    def world_points(self, t):
        return self.poses[t].apply(self.points)

    def frame_motion(self, t):
        """World-frame motion carrying the body from frame ``t`` to ``t+1``."""
        return compose(self.poses[t + 1], self.poses[t].inverse())

    def moves(self, t):
        m = self.frame_motion(t)
        return m.rotation.angle() > 0.0 or np.linalg.norm(m.translation) > 0.0


@dataclass(frozen=True, eq=False)
class Scene:
    static_points: np.ndarray
    bodies: List[RigidBody]
    trajectory: List[Motion]        # world-from-camera
    K: CameraIntrinsics
    seed: int
    config: SceneConfig
    static_surface: np.ndarray = None   # surface id of each static point

    def __post_init__(self):
        if self.static_surface is None:
            object.__setattr__(self, "static_surface", np.zeros(len(self.static_points), np.int64))

    @property
    def n_frames(self):
        return len(self.trajectory)

    def gt_motion(self, t) -> Motion:
        return compose(self.trajectory[t].inverse(), self.trajectory[t + 1])

    def smallest_body_displacement(self, t):
        """Lower bound on how far any body point strays from where a static point would be."""
        out = np.inf
        for body in self.bodies:
            if not body.moves(t):
                continue
            m = body.frame_motion(t)
            d = np.linalg.norm(m.apply(body.world_points(t)) - body.world_points(t), axis=1)
            out = min(out, float(d.min()))
        return out


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.array(self.depth, dtype=float)
        v = np.array(self.valid, dtype=bool)
        if d.shape != v.shape:
            raise DimensionMismatch("depth and validity grids differ")
        d[~v] = 0.0
        d.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class FramePairTruth:
    flow: FlowField
    depth_t: DepthMap
    depth_t1: DepthMap
    gt_mask: SegMask
    gt_motion: Motion
    owner: np.ndarray   # -1 static, -2 uncovered, else body index


# ---------------------------------------------------------------- generation

def _sample_box(rng, size, spacing):
    """Jittered regular sampling of the six faces of an axis-aligned box centred at 0."""
    half = np.asarray(size, dtype=float) / 2.0
    faces = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        na = max(2, int(np.ceil(2 * half[a] / spacing)) + 1)
        nb = max(2, int(np.ceil(2 * half[b] / spacing)) + 1)
        ga, gb = np.meshgrid(np.linspace(-half[a], half[a], na), np.linspace(-half[b], half[b], nb))
        for sign in (-1.0, 1.0):
            pts = np.zeros((ga.size, 3))
            pts[:, a] = ga.ravel()
            pts[:, b] = gb.ravel()
            pts[:, axis] = sign * half[axis]
            faces.append(pts)
    pts = np.concatenate(faces)
    jitter = rng.uniform(-0.15, 0.15, pts.shape) * spacing
    # keep points on their face
    for axis in range(3):
        on_face = np.isclose(np.abs(pts[:, axis]), half[axis])
        jitter[on_face, axis] = 0.0
    return np.clip(pts + jitter, -half, half)


def _sample_panel(rng, size, spacing):
    """Jittered grid on a rectangle in the local z = 0 plane."""
    hw, hh = size[0] / 2.0, size[1] / 2.0
    nx = max(2, int(np.ceil(2 * hw / spacing)) + 1)
    ny = max(2, int(np.ceil(2 * hh / spacing)) + 1)
    gx, gy = np.meshgrid(np.linspace(-hw, hw, nx), np.linspace(-hh, hh, ny))
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    pts[:, :2] += rng.uniform(-0.15, 0.15, (len(pts), 2)) * spacing
    pts[:, 0] = np.clip(pts[:, 0], -hw, hw)
    pts[:, 1] = np.clip(pts[:, 1], -hh, hh)
    return pts


def _backdrop(rng, depth, half_w, half_h, spacing):
    xs = np.arange(-half_w, half_w + spacing, spacing)
    ys = np.arange(-half_h, half_h + spacing, spacing)
    gx, gy = np.meshgrid(xs, ys)
    gx = gx + rng.uniform(-0.15, 0.15, gx.shape) * spacing
    gy = gy + rng.uniform(-0.15, 0.15, gy.shape) * spacing
    ph = rng.uniform(0, 2 * np.pi, 3)
    gz = depth + 0.35 * np.sin(1.1 * gx + ph[0]) * np.sin(0.9 * gy + ph[1]) \
        + 0.2 * np.sin(0.5 * gx + ph[2])
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _random_small_rotation(rng, max_deg):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(max_deg) * rng.uniform(0.3, 1.0)
    return Rotation.from_rotvec(axis * angle)


def _camera_trajectory(rng, cfg: SceneConfig):
    mm = cfg.motion_magnitudes
    poses = [Motion.identity()]
    for _ in range(cfg.frames - 1):
        cam = poses[-1]
        # random heading pulled back toward the origin so long runs stay in the room
        heading = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-0.3, 0.3), rng.uniform(0.2, 1.0)])
        heading = cam.rotation.apply(heading / np.linalg.norm(heading))
        heading -= 0.8 * cam.translation / max(1.0, 4.0 * mm.camera_step)
        if np.linalg.norm(heading) < 1e-9:
            heading = cam.rotation.apply([0.0, 0.0, 1.0])
        step = cam.rotation.inverse().apply(heading / np.linalg.norm(heading)) * mm.camera_step
        rot = _random_small_rotation(rng, mm.camera_rotation_deg) if mm.camera_rotation_deg > 0 \
            else Rotation.identity()
        poses.append(compose(cam, Motion(rot, step)))
    return poses


def _spacing_for(distance, focal):
    # about 1.4 samples per pixel footprint keeps splats hole-free
    return 0.7 * max(distance, 0.5) / focal


def _view_position(rng, K, depth, margin=0.8):
    u = rng.uniform(margin * -K.cx, margin * K.cx)
    v = rng.uniform(margin * -K.cy, margin * K.cy)
    return np.array([u / K.fx * depth, v / K.fy * depth, depth])


def _build_bodies(rng, cfg, K, trajectory, scale):
    mm = cfg.motion_magnitudes
    cam_dir = trajectory[1].translation if len(trajectory) > 1 else np.zeros(3)
    specs = []
    for _ in range(cfg.n_bodies):
        depth = cfg.scene_depth * rng.uniform(0.33, 0.6)
        center = _view_position(rng, K, depth, margin=0.7)
        base = rng.uniform(0.6, 1.2, 3)
        yaw = rng.uniform(-0.3, 0.3)
        speed = rng.uniform(*mm.body_step)
        # favour motion across epipolar planes so the monocular residual sees it
        normal = np.cross(cam_dir, center)
        if np.linalg.norm(normal) < 1e-9:
            normal = np.cross([0.0, 1.0, 0.0], center)
        normal /= np.linalg.norm(normal)
        lateral = rng.standard_normal(3)
        lateral -= lateral.dot(center) / center.dot(center) * center
        lateral /= np.linalg.norm(lateral)
        velocity = normal * rng.choice([-1.0, 1.0]) + 0.5 * lateral
        velocity = velocity / np.linalg.norm(velocity) * speed
        spin = _random_small_rotation(rng, mm.body_rotation_deg) if mm.body_rotation_deg > 0 \
            else Rotation.identity()
        jitter_seed = int(rng.integers(2**31))
        specs.append((center, base, yaw, velocity, spin, jitter_seed))

    bodies = []
    for center, base, yaw, velocity, spin, jitter_seed in specs:
        # grow only the lateral extent; thick bodies would just add hidden points
        size = base * np.array([scale, scale, 1.0])
        poses = []
        rot = Rotation.from_rotvec([0.0, yaw, 0.0])
        c = center.copy()
        for _ in range(cfg.frames):
            poses.append(Motion(rot, c))
            c = c + velocity
            rot = spin * rot
        nearest = min(cam.inverse().apply(p.translation)[2]
                      for p, cam in zip(poses, trajectory)) - 0.5 * np.linalg.norm(size[1:])
        spacing = _spacing_for(nearest, cfg.focal)
        pts = _sample_box(np.random.default_rng(jitter_seed), size, spacing)
        bodies.append(RigidBody(pts, poses))
    return bodies


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Build a scene; body sizes are tuned so frame 0 shows roughly the target dynamic share."""
    cfg = config or SceneConfig()
    K = cfg.intrinsics()
    rng = np.random.default_rng(seed)
    trajectory = _camera_trajectory(rng, cfg)

    # camera positions stay within a few units of the origin
    reach = max(np.linalg.norm(p.translation) for p in trajectory)
    back_depth = cfg.scene_depth
    tan_x = K.cx / K.fx + 0.15
    tan_y = K.cy / K.fy + 0.15
    statics = [_backdrop(rng, back_depth, back_depth * tan_x + reach + 1.0,
                         back_depth * tan_y + reach + 1.0,
                         _spacing_for(back_depth - 0.5 - reach, cfg.focal))]
    # camera-facing panels: grazing faces would make depth lookups unreliable
    for _ in range(cfg.n_static):
        depth = cfg.scene_depth * rng.uniform(0.5, 0.83)
        center = _view_position(rng, K, depth, margin=0.9)
        size = rng.uniform(0.6, 1.8, 2)
        tilt = rng.uniform(-0.35, 0.35, 2)
        spacing = _spacing_for(depth - reach - np.linalg.norm(size), cfg.focal)
        pts = _sample_panel(rng, size, spacing)
        statics.append(Motion(Rotation.from_rotvec([tilt[0], tilt[1], 0.0]), center).apply(pts))
    static_points = np.concatenate(statics)
    static_surface = np.concatenate([np.full(len(p), i) for i, p in enumerate(statics)])

    body_seed = int(rng.integers(2**31))
    bodies = []
    if cfg.n_bodies > 0 and cfg.dynamic_fraction_target > 0:
        scale = 1.0
        target = cfg.dynamic_fraction_target
        for _ in range(12):
            bodies = _build_bodies(np.random.default_rng(body_seed), cfg, K, trajectory, scale)
            probe = Scene(static_points, bodies, trajectory, K, seed, cfg, static_surface)
            achieved = dynamic_fraction(probe, 0)
            if abs(achieved - target) < 0.01:
                break
            ratio = target / max(achieved, 1e-3)
            scale *= float(np.clip(np.sqrt(ratio), 0.5, 2.0))
    return Scene(static_points, bodies, trajectory, K, seed, cfg, static_surface)


# ----------------------------------------------------------------- rendering

def _world_points(scene: Scene, t):
    parts = [scene.static_points] + [b.world_points(t) for b in scene.bodies]
    owner = np.concatenate([np.full(len(p), i - 1) for i, p in enumerate(parts)])
    return np.concatenate(parts), owner


def _surface_ids(scene: Scene):
    """One id per static surface followed by one per body, aligned with ``_world_points``."""
    bodies = [np.full(len(b.points), scene.static_surface.max() + 1 + i)
              for i, b in enumerate(scene.bodies)]
    return np.concatenate([scene.static_surface] + bodies)


def splat(points_cam, K: CameraIntrinsics):
    """Z-buffer one-pixel splats; ties in depth go to the lower point index.

    Returns ``(depth, index)`` grids with ``index == -1`` on uncovered pixels.
    """
    h, w = K.height, K.width
    Z = points_cam[:, 2]
    front = np.flatnonzero(Z > NEAR_PLANE)
    Zf = Z[front]
    u = np.rint(K.fx * points_cam[front, 0] / Zf + K.cx)
    v = np.rint(K.fy * points_cam[front, 1] / Zf + K.cy)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    front, Zf = front[inside], Zf[inside]
    pix = v[inside].astype(np.int64) * w + u[inside].astype(np.int64)
    order = np.lexsort((front, Zf, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    depth = np.zeros(h * w)
    index = np.full(h * w, -1, np.int64)
    depth[pix[win]] = Zf[win]
    index[pix[win]] = front[win]
    return depth.reshape(h, w), index.reshape(h, w)


def dynamic_fraction(scene: Scene, t: int) -> float:
    """Share of covered pixels in frame ``t`` showing a body point."""
    pts, owner = _world_points(scene, t)
    _, index = splat(scene.trajectory[t].inverse().apply(pts), scene.K)
    covered = index >= 0
    if not covered.any():
        return 0.0
    return float(np.mean(owner[index[covered]] >= 0))


def render_pair(scene: Scene, t: int) -> FramePairTruth:
    if not 0 <= t < scene.n_frames - 1:
        raise FrameOutOfRange(f"pair {t} needs frames {t} and {t + 1} of {scene.n_frames}")
    K = scene.K
    h, w = K.height, K.width
    cam_t, cam_t1 = scene.trajectory[t], scene.trajectory[t + 1]

    pts_t, owner = _world_points(scene, t)
    depth_t, index_t = splat(cam_t.inverse().apply(pts_t), K)
    pts_t1, _ = _world_points(scene, t + 1)
    depth_t1, index_t1 = splat(cam_t1.inverse().apply(pts_t1), K)

    covered = index_t >= 0
    owner_map = np.full((h, w), -2, np.int64)
    owner_map[covered] = owner[index_t[covered]]

    grid = pixel_grid(h, w)
    Z = np.where(covered, depth_t, 1.0)
    X = np.stack([(grid[..., 0] - K.cx) / K.fx * Z, (grid[..., 1] - K.cy) / K.fy * Z, Z], axis=-1)
    Y = np.zeros_like(X)
    to_t1 = cam_t1.inverse()
    moving = np.zeros((h, w), bool)
    for o in np.unique(owner_map[covered]):
        sel = owner_map == o
        if o < 0:
            chain = compose(to_t1, cam_t)
        else:
            body = scene.bodies[o]
            chain = compose(to_t1, compose(body.frame_motion(t), cam_t))
            moving |= sel & body.moves(t)
        Y[sel] = chain.apply(X[sel])

    ok = covered & (Y[..., 2] > NEAR_PLANE)
    Yz = np.where(ok, Y[..., 2], 1.0)
    target = np.stack([K.fx * Y[..., 0] / Yz + K.cx, K.fy * Y[..., 1] / Yz + K.cy], axis=-1)

    # hidden in frame t+1: the landing pixel is won by a nearer point of
    # another surface, or by a clearly nearer part of the same one
    surface = _surface_ids(scene)
    tu = np.rint(target[..., 0]).astype(np.int64)
    tv = np.rint(target[..., 1]).astype(np.int64)
    land = ok & (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
    winner = np.full((h, w), -1, np.int64)
    winner[land] = index_t1[tv[land], tu[land]]
    hit = winner >= 0
    hit_depth = np.where(hit, depth_t1[np.clip(tv, 0, h - 1), np.clip(tu, 0, w - 1)], np.inf)
    own = np.full((h, w), -1, np.int64)
    own[covered] = surface[index_t[covered]]
    other = hit & (surface[np.where(hit, winner, 0)] != own)
    occluded = (other & (hit_depth < Yz)) | (hit & (Yz > hit_depth * (1.0 + OCCLUSION_TOLERANCE)))
    flow_valid = ok & ~occluded

    flow = FlowField(np.where(flow_valid[..., None], target - grid, 0.0), flow_valid)
    gt_mask = SegMask((moving & covered).astype(np.uint8), covered)
    return FramePairTruth(
        flow=flow,
        depth_t=DepthMap(depth_t, covered),
        depth_t1=DepthMap(depth_t1, index_t1 >= 0),
        gt_mask=gt_mask,
        gt_motion=scene.gt_motion(t),
        owner=owner_map,
    )


# ---------------------------------------------------------- label recovery

def bilinear_depth(depth: DepthMap, pts, discontinuity=DISCONTINUITY_TOLERANCE):
    """Bilinear depth at subpixel ``pts`` ``(..., 2)``; needs four valid, consistent neighbours."""
    h, w = depth.shape
    x = pts[..., 0]
    y = pts[..., 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & np.isfinite(x) & np.isfinite(y)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xs - x0
    ay = ys - y0
    d = depth.depth
    v = depth.valid
    corners = np.stack([d[y0, x0], d[y0, x1], d[y1, x0], d[y1, x1]])
    cvalid = v[y0, x0] & v[y0, x1] & v[y1, x0] & v[y1, x1]
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    consistent = hi <= lo * (1.0 + discontinuity)
    val = ((1 - ax) * (1 - ay) * corners[0] + ax * (1 - ay) * corners[1]
           + (1 - ax) * ay * corners[2] + ax * ay * corners[3])
    ok = inside & cvalid & consistent
    return np.where(ok, val, 0.0), ok


def recover_motion_mask(depth_t: DepthMap, depth_t1: DepthMap, flow: FlowField,
                        cam_motion: Motion, K: CameraIntrinsics, tau: float = DEFAULT_TAU) -> SegMask:
    """Label pixels whose 3-D displacement disagrees with the camera motion by more than ``tau``.

    A pixel is usable when its flow and depth are valid and the depth lookup
    in the second frame does not straddle a depth edge; other pixels are
    left static and marked invalid.
    """
    if not (depth_t.shape == depth_t1.shape == flow.shape):
        raise DimensionMismatch("depth maps and flow must share dimensions")
    if cam_motion.up_to_scale:
        raise InvalidConfig("mask recovery needs metric camera motion")
    h, w = flow.shape
    grid = pixel_grid(h, w)
    Z = np.where(depth_t.valid, depth_t.depth, 1.0)
    X_t = np.stack([(grid[..., 0] - K.cx) / K.fx * Z, (grid[..., 1] - K.cy) / K.fy * Z, Z], axis=-1)
    predicted = cam_motion.inverse().apply(X_t.reshape(-1, 3)).reshape(h, w, 3)

    target = grid + flow.uv
    d1, ok = bilinear_depth(depth_t1, target)
    X_t1 = np.stack([(target[..., 0] - K.cx) / K.fx * d1, (target[..., 1] - K.cy) / K.fy * d1, d1],
                    axis=-1)
    valid = flow.valid & depth_t.valid & ok
    dist = np.linalg.norm(predicted - X_t1, axis=-1)
    dynamic = valid & ~(dist <= tau)
    return SegMask(dynamic.astype(np.uint8), valid)


def add_flow_noise(flow: FlowField, sigma: float, seed) -> FlowField:
    if sigma < 0:
        raise InvalidConfig("noise sigma must be non-negative")
    if sigma == 0:
        return flow
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(flow.uv.shape) * sigma
    return FlowField(flow.uv + np.where(flow.valid[..., None], noise, 0.0), flow.valid)
