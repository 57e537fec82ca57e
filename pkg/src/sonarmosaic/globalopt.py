"""Nonlinear least-squares refinement of the pose chain.

Minimizes the weighted sum of squared residuals tying consecutive poses
to the locally registered motions (weight lambda, angle weight alpha) and
every pose to its prior (weight 1, angle weight alpha). Local position
deltas are rotated into the world frame with the earlier pose's current
heading estimate, re-evaluated every iteration, so the residual never
mixes coordinate frames.

Every pose carries a prior residual, so the problem has no gauge freedom
and the normal equations stay nonsingular for any connected chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .angles import wrap_angle
from .ekf import PriorTrajectory
from .frames import CartesianFrame, MosaicCanvas, ParameterError, PlacedLayer, Pose2D, warp_to_canvas
from .registration import RegistrationChain

DEFAULT_LAMBDA = 1e4
DEFAULT_ALPHA = 1.0 / 225.0

_MAX_ITERATIONS = 200
_COST_REL_TOL = 1e-9
_STEP_TOL = 1e-10


@dataclass(frozen=True)
class OptProblem:
    """Chain refinement inputs over the valid frames only."""

    prior_xy: np.ndarray  # (m, 2)
    prior_theta: np.ndarray  # (m,)
    motion_dp: np.ndarray  # (m-1, 2) local (earlier-frame) position deltas
    motion_dtheta: np.ndarray  # (m-1,)
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    valid_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lam <= 0 or self.alpha <= 0:
            raise ParameterError("lambda and alpha must be strictly positive")
        xy = np.asarray(self.prior_xy, dtype=float)
        th = np.asarray(self.prior_theta, dtype=float)
        dp = np.asarray(self.motion_dp, dtype=float).reshape(-1, 2)
        dth = np.asarray(self.motion_dtheta, dtype=float).ravel()
        m = xy.shape[0]
        if m < 2 or th.size != m or dp.shape[0] != m - 1 or dth.size != m - 1:
            raise ParameterError("problem needs m >= 2 poses with m-1 motions")
        object.__setattr__(self, "prior_xy", xy)
        object.__setattr__(self, "prior_theta", th)
        object.__setattr__(self, "motion_dp", dp)
        object.__setattr__(self, "motion_dtheta", dth)

    @property
    def n_poses(self) -> int:
        return self.prior_xy.shape[0]

    def initial_guess(self) -> np.ndarray:
        x = np.empty(3 * self.n_poses)
        x[0::3] = self.prior_xy[:, 0]
        x[1::3] = self.prior_xy[:, 1]
        x[2::3] = self.prior_theta
        return x


def problem_from_chain(
    chain: RegistrationChain,
    priors: PriorTrajectory,
    lam: float = DEFAULT_LAMBDA,
    alpha: float = DEFAULT_ALPHA,
) -> OptProblem:
    """Assemble the refinement problem from a registration chain."""
    idx = list(chain.valid_indices)
    xy = np.stack([np.asarray(priors.x)[idx], np.asarray(priors.y)[idx]], axis=1)
    th = np.asarray(priors.theta)[idx]
    dp = []
    dth = []
    for a, b in zip(idx[:-1], idx[1:]):
        motion = chain.motions[(a, b)]
        dp.append(motion.delta_p)
        dth.append(motion.delta_theta)
    return OptProblem(xy, th, np.array(dp), np.array(dth), lam, alpha, tuple(idx))


@dataclass
class OptResult:
    poses: list[Pose2D]
    objective: float
    iterations: int
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    valid_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.objective < 0:
            raise ParameterError("objective cannot be negative")


def build_residuals(poses: np.ndarray, problem: OptProblem) -> np.ndarray:
    """Stacked residual vector at the given pose estimates.

    Layout: per consecutive pair, weighted position (2) and angle (1)
    mismatches against the registered motion; then per pose, position (2)
    and angle (1) mismatches against the prior. Length 3(m-1) + 3m.
    """
    x = np.asarray(poses, dtype=float).reshape(-1, 3)
    m = problem.n_poses
    if x.shape[0] != m:
        raise ParameterError("pose vector length does not match the problem")
    sl = np.sqrt(problem.lam)
    sa = np.sqrt(problem.alpha)

    theta_i = x[:-1, 2]
    c, s = np.cos(theta_i), np.sin(theta_i)
    dp_world_x = c * problem.motion_dp[:, 0] - s * problem.motion_dp[:, 1]
    dp_world_y = s * problem.motion_dp[:, 0] + c * problem.motion_dp[:, 1]

    pair = np.empty((m - 1, 3))
    pair[:, 0] = sl * (x[1:, 0] - x[:-1, 0] - dp_world_x)
    pair[:, 1] = sl * (x[1:, 1] - x[:-1, 1] - dp_world_y)
    pair[:, 2] = sl * sa * wrap_angle(x[1:, 2] - x[:-1, 2] - problem.motion_dtheta)

    prior = np.empty((m, 3))
    prior[:, 0] = x[:, 0] - problem.prior_xy[:, 0]
    prior[:, 1] = x[:, 1] - problem.prior_xy[:, 1]
    prior[:, 2] = sa * wrap_angle(x[:, 2] - problem.prior_theta)
    return np.concatenate([pair.ravel(), prior.ravel()])


def build_jacobian(poses: np.ndarray, problem: OptProblem) -> np.ndarray:
    """Analytic Jacobian matching :func:`build_residuals` row for row."""
    x = np.asarray(poses, dtype=float).reshape(-1, 3)
    m = problem.n_poses
    sl = np.sqrt(problem.lam)
    sa = np.sqrt(problem.alpha)
    n_rows = 3 * (m - 1) + 3 * m
    J = np.zeros((n_rows, 3 * m))

    theta_i = x[:-1, 2]
    c, s = np.cos(theta_i), np.sin(theta_i)
    dpx, dpy = problem.motion_dp[:, 0], problem.motion_dp[:, 1]
    # d/dtheta_i of R(theta_i) dp
    ddx = -s * dpx - c * dpy
    ddy = c * dpx - s * dpy

    for i in range(m - 1):
        r = 3 * i
        J[r, 3 * (i + 1)] = sl
        J[r, 3 * i] = -sl
        J[r, 3 * i + 2] = -sl * ddx[i]
        J[r + 1, 3 * (i + 1) + 1] = sl
        J[r + 1, 3 * i + 1] = -sl
        J[r + 1, 3 * i + 2] = -sl * ddy[i]
        J[r + 2, 3 * (i + 1) + 2] = sl * sa
        J[r + 2, 3 * i + 2] = -sl * sa

    base = 3 * (m - 1)
    for i in range(m):
        J[base + 3 * i, 3 * i] = 1.0
        J[base + 3 * i + 1, 3 * i + 1] = 1.0
        J[base + 3 * i + 2, 3 * i + 2] = sa
    return J


def optimize(problem: OptProblem) -> OptResult:
    """Damped Gauss-Newton (Levenberg-Marquardt) descent from the priors.

    Only cost-decreasing steps are accepted, so the returned objective
    never exceeds the initial one. Persistent damping failure returns the
    best iterate with ``converged=False``.
    """
    x = problem.initial_guess()
    r = build_residuals(x, problem)
    cost = float(r @ r)
    trace = [cost]
    mu = 1e-6
    converged = False
    iterations = 0

    for _ in range(_MAX_ITERATIONS):
        if cost <= 1e-30:
            converged = True
            break
        J = build_jacobian(x, problem)
        g = J.T @ r
        H = J.T @ J
        stepped = False
        while mu <= 1e12:
            try:
                delta = np.linalg.solve(H + mu * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            x_new = x + delta
            r_new = build_residuals(x_new, problem)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                x, r, cost = x_new, r_new, cost_new
                trace.append(cost)
                iterations += 1
                mu = max(mu * 0.3, 1e-12)
                stepped = True
                if rel_drop < _COST_REL_TOL or np.linalg.norm(delta) < _STEP_TOL:
                    converged = True
                break
            mu *= 10.0
        if not stepped:
            break  # damping exhausted; keep best-so-far
        if converged:
            break
    else:
        converged = False

    poses = [
        Pose2D(x[3 * i], x[3 * i + 1], wrap_angle(x[3 * i + 2])) for i in range(problem.n_poses)
    ]
    return OptResult(poses, cost, iterations, converged, trace, problem.valid_indices)


def apply_result(
    result: OptResult,
    frames: list[CartesianFrame],
    canvas: MosaicCanvas,
    scores: list[np.ndarray] | None = None,
    frame_indices: list[int] | None = None,
) -> list[PlacedLayer]:
    """Warp each valid frame onto the canvas at its optimized pose."""
    if len(frames) != len(result.poses):
        raise ParameterError("frames must align one-to-one with optimized poses")
    if scores is not None and len(scores) != len(frames):
        raise ParameterError("scores must align one-to-one with frames")
    indices = frame_indices
    if indices is None:
        indices = list(result.valid_indices) if result.valid_indices else list(range(len(frames)))
    layers = []
    for k, (frame, pose) in enumerate(zip(frames, result.poses)):
        layer = warp_to_canvas(
            frame,
            pose,
            canvas,
            scores=None if scores is None else scores[k],
            frame_index=indices[k],
        )
        canvas.add_layer(layer)
        layers.append(layer)
    return layers
