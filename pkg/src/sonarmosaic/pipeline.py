"""The three mapping schemes: baseline, single-stage, two-stage.

* baseline: local registration only; poses dead-reckoned from the first
  valid prior (priors are still used to gate registrations).
* single_stage: registration, then nonlinear refinement against priors,
  then robust blending.
* two_stage: overlapping frame subsets are built as baseline submaps,
  then the submaps themselves are registered, refined, and blended as
  super-frames.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .angles import circular_mean, rotation_matrix, wrap_angle
from .blending import BlendParams, blend_canvas, compute_feature_scores
from .ekf import PriorTrajectory
from .frames import (
    CartesianFrame,
    MosaicCanvas,
    ParameterError,
    PlacedLayer,
    PolarFrame,
    Pose2D,
    canvas_for_poses,
    warp_to_canvas,
)
from .globalopt import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    OptResult,
    apply_result,
    optimize,
    problem_from_chain,
)
from .preprocess import PreprocessConfig, preprocess_frames
from .registration import ChainError, RegistrationChain, ValidationGate, chain_register
from scipy.ndimage import map_coordinates

SCHEMES = ("baseline", "single_stage", "two_stage")


@dataclass(frozen=True)
class PipelineConfig:
    scheme: str = "single_stage"
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    gate: ValidationGate = field(default_factory=ValidationGate)
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    blend: BlendParams = field(default_factory=BlendParams)
    subset_len: int = 50
    overlap_fraction: float = 0.5
    pixel_scale: float = 0.01
    # submap-vs-submap validation: placement offsets carry the stage-1
    # anchor (prior) errors, which stage 2 exists to correct, so the gate
    # only screens gross registration failures
    stage2_gate: ValidationGate = field(
        default_factory=lambda: ValidationGate(tau_p=6.0, tau_a=float(np.deg2rad(20.0)))
    )

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ParameterError(f"scheme must be one of {SCHEMES}")
        if self.subset_len < 4:
            raise ParameterError("subset_len must be >= 4")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ParameterError("overlap_fraction must lie in [0, 1)")
        if self.pixel_scale <= 0:
            raise ParameterError("pixel_scale must be positive")


@dataclass
class PipelineResult:
    canvas: MosaicCanvas
    frame_indices: list[int]
    poses: list[Pose2D]
    chain: RegistrationChain | None
    opt: OptResult | None
    meta: dict


def frame_reach(cart: CartesianFrame) -> float:
    """Largest apex distance of any valid pixel, meters (max_range for fans)."""
    rows, cols = np.nonzero(cart.valid_mask)
    if rows.size == 0:
        rows = np.array([0.0, cart.shape[0] - 1.0])
        cols = np.array([0.0, cart.shape[1] - 1.0])
    x, y = cart.local_xy_of_pixels(rows, cols)
    return float(np.hypot(x, y).max())


def dead_reckon_poses(chain: RegistrationChain, priors: PriorTrajectory) -> list[Pose2D]:
    """Accumulate local motions from the first valid frame's prior pose."""
    idx = chain.valid_indices
    poses = [priors.pose(idx[0])]
    for a, b in zip(idx[:-1], idx[1:]):
        motion = chain.motions[(a, b)]
        prev = poses[-1]
        dp_world = rotation_matrix(prev.theta) @ motion.delta_p
        poses.append(
            Pose2D(prev.x + dp_world[0], prev.y + dp_world[1], prev.theta + motion.delta_theta)
        )
    return poses


def _blend_at_poses(
    carts: list[CartesianFrame],
    poses: list[Pose2D],
    frame_indices: list[int],
    blend: BlendParams,
    pixel_scale: float,
    pad: float,
    canvas: MosaicCanvas | None = None,
) -> MosaicCanvas:
    """Warp frames (with their feature scores) and fuse them."""
    scores = compute_feature_scores(carts, blend)
    if canvas is None:
        canvas = canvas_for_poses(poses, pad, pixel_scale)
    for cart, pose, score, idx in zip(carts, poses, scores, frame_indices):
        canvas.add_layer(warp_to_canvas(cart, pose, canvas, scores=score, frame_index=idx))
    blend_canvas(canvas, blend)
    return canvas


def _meta(cfg: PipelineConfig, chain: RegistrationChain, opt: OptResult | None, **extra) -> dict:
    meta = {
        "scheme": cfg.scheme,
        "valid_frames": len(chain.valid_indices),
        "rejections": len(chain.rejections),
        "solver_iterations": 0 if opt is None else opt.iterations,
        "solver_converged": None if opt is None else opt.converged,
    }
    meta.update(extra)
    return meta


def run_baseline(
    frames: list[PolarFrame],
    priors: PriorTrajectory,
    cfg: PipelineConfig,
    carts: list[CartesianFrame] | None = None,
    motion_cache: dict | None = None,
) -> PipelineResult:
    """Registration-gated dead reckoning plus robust blending."""
    if carts is None:
        carts = preprocess_frames(frames, cfg.preprocess, cfg.pixel_scale)
    chain = chain_register(carts, priors, cfg.gate, motion_cache=motion_cache)
    poses = dead_reckon_poses(chain, priors)
    valid_carts = [carts[i] for i in chain.valid_indices]
    pad = frame_reach(valid_carts[0])
    canvas = _blend_at_poses(
        valid_carts, poses, chain.valid_indices, cfg.blend, cfg.pixel_scale, pad
    )
    return PipelineResult(
        canvas, list(chain.valid_indices), poses, chain, None, _meta(cfg, chain, None)
    )


def run_single_stage(
    frames: list[PolarFrame],
    priors: PriorTrajectory,
    cfg: PipelineConfig,
    carts: list[CartesianFrame] | None = None,
    motion_cache: dict | None = None,
) -> PipelineResult:
    """The complete pipeline: register, refine against priors, blend."""
    if carts is None:
        carts = preprocess_frames(frames, cfg.preprocess, cfg.pixel_scale)
    chain = chain_register(carts, priors, cfg.gate, motion_cache=motion_cache)
    problem = problem_from_chain(chain, priors, cfg.lam, cfg.alpha)
    result = optimize(problem)
    valid_carts = [carts[i] for i in chain.valid_indices]
    pad = frame_reach(valid_carts[0])
    canvas = _blend_at_poses(
        valid_carts, result.poses, chain.valid_indices, cfg.blend, cfg.pixel_scale, pad
    )
    return PipelineResult(
        canvas, list(chain.valid_indices), result.poses, chain, result, _meta(cfg, chain, result)
    )


def subset_starts(n_frames: int, subset_len: int, overlap_fraction: float) -> list[int]:
    """Start indices of overlapping subsets covering the whole sequence."""
    if n_frames < subset_len:
        raise ParameterError("two-stage needs at least subset_len frames")
    stride = max(1, int(round(subset_len * (1.0 - overlap_fraction))))
    starts = list(range(0, n_frames - subset_len + 1, stride))
    if starts[-1] != n_frames - subset_len:
        starts.append(n_frames - subset_len)
    return starts


@dataclass
class Submap:
    """A stage-1 mosaic treated as a super-frame in stage 2."""

    frame: CartesianFrame  # blended intensities in the anchor-local grid
    scores: np.ndarray  # max-pooled member feature scores, same grid
    anchor: Pose2D  # world prior pose of the submap
    member_indices: list[int]
    member_poses: list[Pose2D]  # stage-1 world poses of the members
    timestamp: float


def _build_submap(
    carts: list[CartesianFrame],
    priors: PriorTrajectory,
    member_range: range,
    cfg: PipelineConfig,
    motion_cache: dict | None = None,
) -> Submap | None:
    sub_idx = list(member_range)
    sub_carts = [carts[i] for i in sub_idx]
    sub_priors = priors.subset(sub_idx)
    start = member_range.start
    local_cache = None
    if motion_cache is not None:
        span = range(member_range.start, member_range.stop)
        local_cache = {
            (i - start, j - start): m
            for (i, j), m in motion_cache.items()
            if i in span and j in span
        }
    try:
        chain = chain_register(sub_carts, sub_priors, cfg.gate, motion_cache=local_cache)
    except ChainError:
        warnings.warn(f"submap {member_range.start}..{member_range.stop} dropped: no valid chain")
        return None
    if motion_cache is not None and local_cache:
        motion_cache.update({(i + start, j + start): m for (i, j), m in local_cache.items()})
    poses = dead_reckon_poses(chain, sub_priors)
    valid_local = chain.valid_indices
    valid_carts = [sub_carts[i] for i in valid_local]
    member_indices = [sub_idx[i] for i in valid_local]
    pad = frame_reach(valid_carts[0])
    canvas = _blend_at_poses(
        valid_carts, poses, member_indices, cfg.blend, cfg.pixel_scale, pad
    )
    # max-pooled member feature scores on the submap canvas
    score_max = np.zeros(canvas.shape)
    for layer in canvas.layers:
        if layer.empty or layer.score is None:
            continue
        h, w = layer.shape
        sl = (slice(layer.row0, layer.row0 + h), slice(layer.col0, layer.col0 + w))
        score_max[sl] = np.maximum(score_max[sl], np.where(layer.valid, layer.score, 0.0))

    # submap prior: mean of member prior positions, circular-mean heading
    anchor = Pose2D(
        float(np.mean([sub_priors.x[i] for i in valid_local])),
        float(np.mean([sub_priors.y[i] for i in valid_local])),
        circular_mean([sub_priors.theta[i] for i in valid_local]),
    )
    frame, scores = _resample_submap(canvas, score_max, anchor, cfg.pixel_scale)
    t_mid = float(np.mean([sub_priors.t[i] for i in valid_local]))
    return Submap(frame, scores, anchor, member_indices, poses, t_mid)


def _resample_submap(
    canvas: MosaicCanvas, score_max: np.ndarray, anchor: Pose2D, pixel_scale: float
) -> tuple[CartesianFrame, np.ndarray]:
    """Resample a world-aligned submap canvas into the anchor-local frame."""
    blended = canvas.blended
    covered = canvas.coverage() & (blended >= 0.0)
    h, w = blended.shape
    corners_x, corners_y = canvas.pixel_to_world(
        np.array([0.0, w - 1.0, 0.0, w - 1.0]), np.array([0.0, 0.0, h - 1.0, h - 1.0])
    )
    local = anchor.local_from_world(np.stack([corners_x, corners_y], axis=-1))
    x_lo, x_hi = local[:, 0].min(), local[:, 0].max()
    y_lo, y_hi = local[:, 1].min(), local[:, 1].max()
    n_cols = int(np.ceil((x_hi - x_lo) / pixel_scale)) + 1
    n_rows = int(np.ceil((y_hi - y_lo) / pixel_scale)) + 1
    apex = (-y_lo / pixel_scale, -x_lo / pixel_scale)  # local origin's pixel position

    cols = np.arange(n_cols, dtype=float)[None, :]
    rows = np.arange(n_rows, dtype=float)[:, None]
    lx = (cols - apex[1]) * pixel_scale
    ly = (rows - apex[0]) * pixel_scale
    wxy = anchor.world_from_local(np.stack(np.broadcast_arrays(lx, ly), axis=-1))
    pix = canvas.world_to_pixel(wxy)
    coords = [pix[..., 1], pix[..., 0]]

    maskf = covered.astype(float)
    weight = map_coordinates(maskf, coords, order=1, mode="constant", cval=0.0)
    nn = map_coordinates(covered.astype(np.uint8), coords, order=0, mode="constant", cval=0)
    good = (nn == 1) & (weight > 1e-9)
    num = map_coordinates(np.where(covered, blended, 0.0), coords, order=1, mode="constant")
    intensity = np.where(good, num / np.where(weight > 1e-9, weight, 1.0), 0.0)
    snum = map_coordinates(np.where(covered, score_max, 0.0), coords, order=1, mode="constant")
    scores = np.where(good, snum / np.where(weight > 1e-9, weight, 1.0), 0.0)
    frame = CartesianFrame(np.clip(intensity, 0.0, 1.0), good, pixel_scale, apex)
    return frame, scores


def run_two_stage(
    frames: list[PolarFrame],
    priors: PriorTrajectory,
    cfg: PipelineConfig,
    carts: list[CartesianFrame] | None = None,
    motion_cache: dict | None = None,
) -> PipelineResult:
    """Baseline submaps aligned and fused through the complete pipeline."""
    if carts is None:
        carts = preprocess_frames(frames, cfg.preprocess, cfg.pixel_scale)
    n = len(carts)
    starts = subset_starts(n, cfg.subset_len, cfg.overlap_fraction)
    submaps: list[Submap] = []
    for start in starts:
        submap = _build_submap(
            carts, priors, range(start, start + cfg.subset_len), cfg, motion_cache
        )
        if submap is not None:
            submaps.append(submap)
    if len(submaps) < 2:
        raise ChainError(f"only {len(submaps)} submap(s) survived stage 1")

    sub_priors = PriorTrajectory(
        np.array([s.timestamp for s in submaps]),
        np.array([s.anchor.x for s in submaps]),
        np.array([s.anchor.y for s in submaps]),
        np.array([s.anchor.theta for s in submaps]),
    )
    sub_frames = [s.frame for s in submaps]
    chain = chain_register(sub_frames, sub_priors, cfg.stage2_gate)
    problem = problem_from_chain(chain, sub_priors, cfg.lam, cfg.alpha)
    result = optimize(problem)

    kept = [submaps[i] for i in chain.valid_indices]
    pad = max(frame_reach(s.frame) for s in kept)
    canvas = canvas_for_poses(result.poses, pad, cfg.pixel_scale)
    for submap, pose in zip(kept, result.poses):
        canvas.add_layer(
            warp_to_canvas(
                submap.frame, pose, canvas, scores=submap.scores, frame_index=submap.member_indices[0]
            )
        )
    blend_canvas(canvas, cfg.blend)

    # per-frame trajectory: apply each submap's rigid correction to its members,
    # preferring the submap whose center is closest to the frame
    frame_pose: dict[int, tuple[float, Pose2D]] = {}
    for submap, pose in zip(kept, result.poses):
        correction = pose.compose(submap.anchor.inverse())
        center = 0.5 * (submap.member_indices[0] + submap.member_indices[-1])
        for idx, member_pose in zip(submap.member_indices, submap.member_poses):
            dist = abs(idx - center)
            if idx not in frame_pose or dist < frame_pose[idx][0]:
                frame_pose[idx] = (dist, correction.compose(member_pose))
    indices = sorted(frame_pose)
    poses = [frame_pose[i][1] for i in indices]

    meta = _meta(cfg, chain, result, submaps=len(submaps), submap_starts=starts)
    return PipelineResult(canvas, indices, poses, chain, result, meta)


def run_pipeline(
    frames: list[PolarFrame],
    priors: PriorTrajectory,
    cfg: PipelineConfig,
    carts: list[CartesianFrame] | None = None,
    motion_cache: dict | None = None,
) -> PipelineResult:
    """Dispatch on the configured scheme."""
    if len(frames if carts is None else carts) < 2:
        raise ParameterError("the pipeline needs at least two frames")
    runner = {
        "baseline": run_baseline,
        "single_stage": run_single_stage,
        "two_stage": run_two_stage,
    }[cfg.scheme]
    return runner(frames, priors, cfg, carts=carts, motion_cache=motion_cache)
