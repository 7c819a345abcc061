"""Iterative joint refinement of camera motion and motion segmentation.

``run_pair`` computes flow once, estimates a first pose with a random cow-mask,
then alternates segmentation and pose estimation until two successive motions
agree.  ``run_sequence`` chains pairs into a world-frame trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, List, Optional

import numpy as np

from .errors import AllDynamic, DataError, DegenerateMotion, InsufficientStaticSupport, InvalidConfig
from .flow import FlowField, downsample_flow, mask_flow
from .geometry import CameraIntrinsics, Motion, compose, geodesic_angle, translation_angle
from .pose import MotionEstimate, PoseConfig, estimate_motion
from .segmentation import (ProbabilityMap, SegMask, ThresholdSchedule, binarize, cow_mask,
                           segment_residual, threshold_for_iteration)

ALL_DYNAMIC_FRACTION = 0.99


@dataclass(frozen=True)
class FramePair:
    """Handle on frames ``index`` and ``index + 1`` of ``source``."""

    index: int
    source: Any = None


@dataclass
class BackendSet:
    flow_provider: Callable        # FramePair -> FlowField
    segmenter: Callable            # (flow, motion, aux) -> ProbabilityMap
    pose_estimator: Callable       # (masked flow, mask, K) -> MotionEstimate

    def __post_init__(self):
        for name in ("flow_provider", "segmenter", "pose_estimator"):
            if getattr(self, name) is None:
                raise InvalidConfig(f"backend {name} is missing")


@dataclass(frozen=True)
class PipelineConfig:
    max_iters: int = 4
    eps_R: float = 0.004363        # rad, 0.25 deg
    eps_t: float = 0.01745         # rad, 1 deg
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    cow_fraction: float = 0.25
    # blob scale on the quarter-resolution flow grid (8..32 px at full size)
    cow_sigma_range: tuple = (2.0, 8.0)
    min_support: int = 50
    sigma_r: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidConfig("max_iters must be at least 1")
        if self.eps_R <= 0 or self.eps_t <= 0:
            raise InvalidConfig("stopping thresholds must be positive")
        if not 0.0 <= self.cow_fraction < 1.0:
            raise InvalidConfig("cow-mask fraction must lie in [0, 1)")
        if self.sigma_r <= 0 or self.min_support < 8:
            raise InvalidConfig("bad segmentation settings")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ThresholdSchedule(**self.schedule))
        object.__setattr__(self, "cow_sigma_range", tuple(float(s) for s in self.cow_sigma_range))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    motion: Motion
    z_threshold: Optional[float]   # None for the cow-mask pass
    mask_fraction: float
    delta_R: Optional[float]
    delta_t: Optional[float]
    inlier_count: int

    def to_json(self):
        m = self.motion
        return {
            "iteration": self.iteration,
            "z_threshold": self.z_threshold,
            "mask_fraction": self.mask_fraction,
            "delta_R": self.delta_R,
            "delta_t": self.delta_t,
            "inlier_count": self.inlier_count,
            "quat_wxyz": [float(q) for q in m.rotation.quat],
            "translation": [float(v) for v in m.translation],
        }


class IterationTrace(list):
    """Per-iteration records, iteration 1 first."""

    def to_jsonl(self, frame=None):
        lines = []
        for rec in self:
            row = rec.to_json()
            if frame is not None:
                row = {"frame": frame, **row}
            lines.append(json.dumps(row, sort_keys=True))
        return "".join(line + "\n" for line in lines)


@dataclass(frozen=True, eq=False)
class FrameResult:
    motion: Motion
    converged: bool
    trace: IterationTrace
    mask: Optional[SegMask] = None          # mask used for the final pose
    prob: Optional[ProbabilityMap] = None   # last segmenter output, if any

    @property
    def iterations(self):
        return len(self.trace)


def _tag(err, iteration):
    err.iteration = iteration
    if err.args and "iteration" not in str(err.args[0]):
        err.args = (f"{err.args[0]} (iteration {iteration})",) + err.args[1:]
    return err


def run_pair(pair: FramePair, K: CameraIntrinsics, backends: BackendSet,
             config: PipelineConfig | None = None) -> FrameResult:
    cfg = config or PipelineConfig()
    flow = backends.flow_provider(pair)
    if flow.shape != (K.height, K.width):
        raise InvalidConfig(f"flow grid {flow.shape} does not match intrinsics {K.width}x{K.height}")
    h, w = flow.shape
    aux = {"K": K, "pair": pair}

    trace = IterationTrace()
    mask = cow_mask(cfg.seed ^ pair.index, h, w, cfg.cow_fraction, cfg.cow_sigma_range)
    prob = None
    prev = None
    converged = False
    for i in range(1, cfg.max_iters + 1):
        z_thr = None
        if i > 1:
            try:
                prob = backends.segmenter(flow, prev.motion, aux)
            except DataError as err:
                raise _tag(err, i)
            z_thr = threshold_for_iteration(cfg.schedule, i - 1)
            mask = binarize(prob, z_thr)
            covered = mask.fraction(within=flow.valid)
            if covered > ALL_DYNAMIC_FRACTION:
                raise AllDynamic(f"mask covers {covered:.1%} of valid pixels (iteration {i})",
                                 fraction=covered, iteration=i)
        try:
            est = backends.pose_estimator(mask_flow(flow, mask), mask, K)
        except DataError as err:
            raise _tag(err, i)
        dR = dt = None
        if prev is not None:
            dR = geodesic_angle(prev.motion.rotation, est.motion.rotation)
            dt = translation_angle(prev.motion.translation, est.motion.translation)
        trace.append(IterationRecord(i, est.motion, z_thr, mask.fraction(within=flow.valid),
                                     dR, dt, est.inlier_count))
        prev = est
        if dR is not None and dR < cfg.eps_R and dt < cfg.eps_t:
            converged = True
            break
    return FrameResult(prev.motion, converged, trace, mask, prob)


# ------------------------------------------------------------ oracle backends

class SimulatorFlowProvider:
    """Ground-truth flow from a simulated scene, optionally block-downsampled and noised.

    Rendering is cached per pair so repeated runs and ground-truth lookups
    share one render.  ``calls`` counts provider invocations.
    """

    def __init__(self, scene, downsample=1, noise_sigma=0.0, noise_seed=0):
        self.scene = scene
        self.downsample = int(downsample)
        self.noise_sigma = float(noise_sigma)
        self.noise_seed = noise_seed
        self.calls = 0
        self._truth = {}

    def truth(self, index):
        from .simulator import render_pair
        if index not in self._truth:
            self._truth[index] = render_pair(self.scene, index)
        return self._truth[index]

    def __call__(self, pair: FramePair) -> FlowField:
        from .simulator import add_flow_noise
        self.calls += 1
        flow = self.truth(pair.index).flow
        if self.downsample > 1:
            flow = downsample_flow(flow, self.downsample)
        if self.noise_sigma > 0:
            flow = add_flow_noise(flow, self.noise_sigma, (self.noise_seed, pair.index))
        return flow


class ResidualSegmenter:
    """Geometric segmenter: epipolar residual of the flow under the given motion."""

    def __init__(self, sigma_r=1.5):
        self.sigma_r = sigma_r
        self.calls = 0

    def __call__(self, flow, motion, aux) -> ProbabilityMap:
        self.calls += 1
        return segment_residual(flow, motion, aux["K"], sigma_r=self.sigma_r)


class RansacPoseEstimator:
    def __init__(self, config: PoseConfig | None = None):
        self.config = config or PoseConfig()
        self.calls = 0

    def __call__(self, masked_flow, mask, K) -> MotionEstimate:
        self.calls += 1
        return estimate_motion(masked_flow, mask, K, self.config)


def oracle_backends(scene, config: PipelineConfig | None = None, pose_config: PoseConfig | None = None,
                    noise_sigma=0.0) -> BackendSet:
    cfg = config or PipelineConfig()
    pc = pose_config or PoseConfig(min_support=cfg.min_support, seed=cfg.seed)
    return BackendSet(SimulatorFlowProvider(scene, noise_sigma=noise_sigma, noise_seed=cfg.seed),
                      ResidualSegmenter(cfg.sigma_r), RansacPoseEstimator(pc))


# ----------------------------------------------------------------- sequences

@dataclass(frozen=True, eq=False)
class SequenceResult:
    trajectory: Any                 # evaluation.Trajectory
    results: List[Optional[FrameResult]]
    failures: dict                  # pair index -> error message


def run_sequence(n_frames: int, K: CameraIntrinsics, backends: BackendSet,
                 config: PipelineConfig | None = None, scale_mode="unit",
                 step_lengths=None, source=None, timestamps=None) -> SequenceResult:
    """Chain ``run_pair`` over frames ``0 .. n_frames - 1``.

    ``scale_mode="gt_scale"`` multiplies each unit translation by the matching
    entry of ``step_lengths``; ``"unit"`` keeps unit steps.  A pair that fails
    contributes an identity step and is flagged.
    """
    from .evaluation import FLAG_SUBSTITUTED, Trajectory

    cfg = config or PipelineConfig()
    if n_frames < 2:
        raise InvalidConfig("a sequence needs at least two frames")
    if scale_mode not in ("unit", "gt_scale"):
        raise InvalidConfig(f"unknown scale mode {scale_mode!r}")
    if scale_mode == "gt_scale" and (step_lengths is None or len(step_lengths) < n_frames - 1):
        raise InvalidConfig("gt_scale needs one ground-truth step length per pair")

    poses = [Motion.identity()]
    flags = [0]
    results, failures = [], {}
    for t in range(n_frames - 1):
        try:
            res = run_pair(FramePair(t, source), K, backends, cfg)
        except DataError as err:
            results.append(None)
            failures[t] = f"{type(err).__name__}: {err}"
            step, flag = Motion.identity(), FLAG_SUBSTITUTED
        else:
            results.append(res)
            s = step_lengths[t] if scale_mode == "gt_scale" else 1.0
            step, flag = res.motion.scaled(s), 0
        poses.append(compose(poses[-1], step))
        flags.append(flag)
    if timestamps is None:
        timestamps = np.arange(n_frames, dtype=float)
    return SequenceResult(Trajectory(timestamps, poses, flags), results, failures)
