"""Two-view ego-motion from masked flow, and the training losses.

The estimator works on correspondences ``x <-> x + flow`` of valid, unmasked
pixels:

1. seeded RANSAC over eight-point essential-matrix hypotheses, scored with a
   truncated Sampson cost on a fixed subsample;
2. four-fold decomposition of the winner, chosen by a cheirality vote;
3. Gauss-Newton on the Sampson residuals of the inliers, with the rotation
   updated on SO(3) and the translation kept on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMotion, DimensionMismatch, InsufficientStaticSupport, InvalidConfig, NoOverlap
from .flow import FlowField
from .geometry import CameraIntrinsics, Motion, Rotation, hat
from .segmentation import ProbabilityMap, SegMask, pixel_grid

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PoseConfig:
    ransac_iters: int = 500
    inlier_thresh_px: float = 1.0
    min_support: int = 50
    refine_iters: int = 10
    seed: int = 0
    confidence: float = 0.999
    score_sample: int = 500    # correspondences used to rank hypotheses
    refine_sample: int = 3000  # inliers used by Gauss-Newton
    min_flow_px: float = 0.05

    def __post_init__(self):
        if self.ransac_iters < 1 or self.inlier_thresh_px <= 0 or self.min_support < 8:
            raise InvalidConfig("bad RANSAC settings")
        if self.refine_iters < 0 or self.score_sample < 8:
            raise InvalidConfig("bad refinement settings")


@dataclass(frozen=True, eq=False)
class MotionEstimate:
    """Up-to-scale camera motion plus the evidence behind it."""

    motion: Motion
    inlier_count: int
    support_count: int
    mean_sampson: float            # pixels
    inliers: np.ndarray = None     # (h, w) bool
    iterations: int = 0            # RANSAC hypotheses evaluated


# ------------------------------------------------------------------ helpers

def _homog(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _eight_point(x1, x2):
    """Batched linear essential estimate from ``(B, 8, 2)`` samples, projected onto the essential manifold."""
    a = _homog(x1)
    b = _homog(x2)
    A = (b[..., :, None] * a[..., None, :]).reshape(*a.shape[:-1], 9)
    _, _, vt = np.linalg.svd(A)
    E = vt[..., -1, :].reshape(-1, 3, 3)
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[:, 0] + S[:, 1])
    D = np.zeros_like(E)
    D[:, 0, 0] = s
    D[:, 1, 1] = s
    return U @ D @ Vt


def _sampson_sq(E, x1h, x2h):
    """Squared Sampson distances; ``E`` is ``(B, 3, 3)``, points ``(N, 3)`` -> ``(B, N)``."""
    Ex1 = x1h @ E.transpose(0, 2, 1)
    Etx2 = x2h @ E
    num = np.sum(x2h * Ex1, axis=-1)
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    return num * num / np.maximum(den, 1e-300)


def decompose_essential(E):
    """Four ``(R, t)`` candidates with ``X2 = R X1 + t`` and unit ``t``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_depths(R, t, x1, x2):
    """Depths of each correspondence in both cameras.

    Solves ``z2 * x2h = z1 * R x1h + t`` in the least-squares sense.
    """
    a = _homog(x1) @ R.T
    b = _homog(x2)
    # [a, -b] [z1, z2]^T = -t
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    ab = np.sum(a * b, axis=1)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    det = np.where(np.abs(det) < 1e-15, np.nan, det)
    z1 = (-bb * at + ab * bt) / det
    z2 = (aa * bt - ab * at) / det
    return z1, z2


def cheirality_count(R, t, x1, x2):
    z1, z2 = triangulate_depths(R, t, x1, x2)
    return int(np.sum((z1 > 0) & (z2 > 0)))


def _tangent_basis(t):
    helper = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return b1, b2


def _signed_sampson(E, x1h, x2h):
    Ex1 = x1h @ E.T
    Etx2 = x2h @ E
    num = np.sum(x2h * Ex1, axis=1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.sqrt(den), num, den, Ex1, Etx2


def refine_pose(R, t, x1, x2, iters=10):
    """Gauss-Newton on signed Sampson residuals; 3 rotation + 2 translation parameters."""
    x1h = _homog(x1)
    x2h = _homog(x2)
    t = t / np.linalg.norm(t)

    def cost(R, t):
        e = _signed_sampson(hat(t) @ R, x1h, x2h)[0]
        return float(e @ e)

    current = cost(R, t)
    for _ in range(iters):
        E = hat(t) @ R
        e, num, den, Ex1, Etx2 = _signed_sampson(E, x1h, x2h)
        sq = np.sqrt(den)
        b1, b2 = _tangent_basis(t)
        tx = hat(t)
        # E perturbations for the three rotation and two translation directions
        dE = np.stack([tx @ hat(np.eye(3)[k]) @ R for k in range(3)] + [hat(b1) @ R, hat(b2) @ R])
        D1 = x1h @ dE.transpose(0, 2, 1)       # (5, n, 3): dE x1
        D2 = x2h @ dE                          # (5, n, 3): dE^T x2
        dnum = np.sum(x2h * D1, axis=-1)
        dden = 2 * (Ex1[:, 0] * D1[..., 0] + Ex1[:, 1] * D1[..., 1]
                    + Etx2[:, 0] * D2[..., 0] + Etx2[:, 1] * D2[..., 1])
        J = (dnum / sq - (num / (2 * den * sq)) * dden).T
        H = J.T @ J
        g = J.T @ e
        try:
            step = -np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(5), g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(8):
            R_new = Rotation.from_rotvec(step[:3]).as_matrix() @ R
            t_new = t + step[3] * b1 + step[4] * b2
            t_new /= np.linalg.norm(t_new)
            c = cost(R_new, t_new)
            if c <= current:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = current - c
        R, t, current = R_new, t_new, c
        if improvement <= 1e-12 * max(current, 1e-30) or np.linalg.norm(step) < 1e-10:
            break
    return R, t


# --------------------------------------------------------------- estimator

def _spread(idx, cap):
    """At most ``cap`` evenly spaced entries of ``idx``."""
    if len(idx) <= cap:
        return idx
    return idx[np.linspace(0, len(idx) - 1, cap).astype(int)]


def correspondences(flow: FlowField, mask: SegMask | None = None):
    """Pixel coordinates of usable correspondences and their flat indices."""
    use = flow.valid.copy()
    if mask is not None:
        labels = np.asarray(getattr(mask, "labels", mask))
        if labels.shape != flow.shape:
            raise DimensionMismatch(f"mask {labels.shape} vs flow {flow.shape}")
        use &= labels == 0
    grid = pixel_grid(*flow.shape)
    return grid[use], grid[use] + flow.uv[use], use


def estimate_motion(masked_flow: FlowField, mask: SegMask, K: CameraIntrinsics,
                    config: PoseConfig | None = None) -> MotionEstimate:
    cfg = config or PoseConfig()
    if (K.height, K.width) != masked_flow.shape:
        raise DimensionMismatch(f"intrinsics {K.width}x{K.height} vs flow {masked_flow.shape}")
    p1, p2, use = correspondences(masked_flow, mask)
    n = len(p1)
    if n < cfg.min_support:
        raise InsufficientStaticSupport(
            f"{n} static correspondences, need {cfg.min_support}", support=n)
    if np.median(np.linalg.norm(p2 - p1, axis=1)) < cfg.min_flow_px:
        raise DegenerateMotion("flow is essentially zero; translation direction is unobservable")

    x1 = K.normalize(p1)
    x2 = K.normalize(p2)
    x1h, x2h = _homog(x1), _homog(x2)
    thr = cfg.inlier_thresh_px / K.fx
    thr_sq = thr * thr

    rng = np.random.default_rng(cfg.seed)
    samples = rng.integers(0, n, size=(cfg.ransac_iters, 8))
    score_idx = np.sort(rng.choice(n, size=min(cfg.score_sample, n), replace=False))
    sx1, sx2 = x1h[score_idx], x2h[score_idx]
    m = len(score_idx)

    best_cost, best_E, best_k = np.inf, None, -1
    needed = cfg.ransac_iters
    done = 0
    chunk = 16
    while done < min(needed, cfg.ransac_iters):
        stop = min(done + chunk, cfg.ransac_iters)
        chunk = min(2 * chunk, 128)
        batch = samples[done:stop]
        Es = _eight_point(x1[batch], x2[batch])
        d2 = _sampson_sq(Es, sx1, sx2)
        costs = np.minimum(d2, thr_sq).sum(axis=1)
        costs = np.where(np.isfinite(costs), costs, np.inf)
        k = int(np.argmin(costs))     # first minimum: lowest hypothesis index wins ties
        if costs[k] < best_cost:
            best_cost, best_E, best_k = costs[k], Es[k], done + k
            w = float(np.mean(d2[k] < thr_sq))
            if w >= 1.0:
                needed = done + 1
            elif w > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - w ** 8)))
        done = stop
    if best_E is None:
        raise DegenerateMotion("no finite essential-matrix hypothesis")

    inl = _sampson_sq(best_E[None], x1h, x2h)[0] < thr_sq
    if inl.sum() < 8:
        raise InsufficientStaticSupport("fewer than 8 inliers", support=int(inl.sum()))
    if np.median(np.linalg.norm((p2 - p1)[inl], axis=1)) < cfg.min_flow_px:
        raise DegenerateMotion("inlier flow is essentially zero")

    # cheirality vote on (a subsample of) the inliers
    vote = _spread(np.flatnonzero(inl), 2000)
    cands = decompose_essential(best_E)
    counts = [cheirality_count(R, t, x1[vote], x2[vote]) for R, t in cands]
    R, t = cands[int(np.argmax(counts))]

    for _ in range(2):
        sub = _spread(np.flatnonzero(inl), cfg.refine_sample)
        R, t = refine_pose(R, t, x1[sub], x2[sub], cfg.refine_iters)
        d2 = _sampson_sq((hat(t) @ R)[None], x1h, x2h)[0]
        new_inl = d2 < thr_sq
        changed = not np.array_equal(new_inl, inl)
        inl = new_inl
        if inl.sum() < 8:
            raise InsufficientStaticSupport("refined model keeps fewer than 8 inliers",
                                            support=int(inl.sum()))
        if not changed:
            break

    inlier_map = np.zeros(masked_flow.shape, bool)
    inlier_map[use] = inl
    # (R, t) maps first-camera points into the second; report the camera motion
    motion = Motion(Rotation.from_matrix(R), t).inverse().normalized()
    return MotionEstimate(
        motion=motion,
        inlier_count=int(inl.sum()),
        support_count=n,
        mean_sampson=float(np.sqrt(d2[inl]).mean() * K.fx) if inl.any() else float("nan"),
        inliers=inlier_map,
        iterations=done,
    )


# ------------------------------------------------------------------- losses

_LOSS_EPS = 1e-6
_BCE_CLAMP = 1e-7


def motion_loss(est: Motion, gt: Motion) -> float:
    """Normalized-translation distance plus axis-angle rotation distance."""
    te = np.asarray(est.translation)
    tg = np.asarray(gt.translation)
    dt = te / max(np.linalg.norm(te), _LOSS_EPS) - tg / max(np.linalg.norm(tg), _LOSS_EPS)
    dr = est.rotation.as_rotvec() - gt.rotation.as_rotvec()
    return float(np.linalg.norm(dt) + np.linalg.norm(dr))


def flow_loss(est: FlowField, gt: FlowField) -> float:
    if est.shape != gt.shape:
        raise DimensionMismatch(f"{est.shape} vs {gt.shape}")
    both = est.valid & gt.valid
    if not both.any():
        raise NoOverlap("no pixel is valid in both flow fields")
    return float(np.abs(est.uv[both] - gt.uv[both]).sum(axis=1).mean())


def seg_loss(z: ProbabilityMap, gt: SegMask) -> float:
    """Mean binary cross-entropy over all pixels."""
    prob = np.asarray(getattr(z, "prob", z), dtype=float)
    labels = np.asarray(getattr(gt, "labels", gt), dtype=float)
    if prob.shape != labels.shape:
        raise DimensionMismatch(f"{prob.shape} vs {labels.shape}")
    p = np.clip(prob, _BCE_CLAMP, 1 - _BCE_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("loss weights must be non-negative")


def aggregate_loss(flow_l: float, seg_l: float, motion_l: float, weights: LossWeights) -> float:
    return weights.lambda1 * flow_l + weights.lambda2 * seg_l + motion_l
