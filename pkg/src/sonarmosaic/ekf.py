"""EKF fusion of IMU, GPS, and compass into per-frame pose priors.

State vector (8): [px, py, vx, vy, psi, b_omega, b_ax, b_ay]. IMU samples
drive the predict stage through a planar kinematic model; GPS and compass
apply linear updates in Joseph form. Process noise enters through the
control (IMU) channels plus a random walk on the bias states.

The module is strictly sequential by contract: filter state depends on
event order. Distinct trajectories may be fused in parallel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .angles import interp_headings, wrap_angle
from .frames import ParameterError, Pose2D

PX, PY, VX, VY, PSI, BW, BAX, BAY = range(8)

_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class EkfConfig:
    accel_noise: float = 0.05  # m/s^2, injected via the accel channels
    gyro_noise: float = 0.0  # rad/s, injected via the yaw-rate channel
    bias_walk: float = 1e-4  # random-walk sigma per sqrt(s), all bias states
    gps_sigma: float = 1.5  # m per axis (consumer receiver class)
    compass_sigma: float = float(np.deg2rad(2.0))
    init_pos_sigma: float = 2.0
    init_vel_sigma: float = 0.5
    init_heading_sigma: float = float(np.deg2rad(10.0))
    init_gyro_bias_sigma: float = 0.05
    init_accel_bias_sigma: float = 0.1
    # width of the symmetric post-filter average applied at frame times;
    # update-instant position jumps would otherwise leak into the
    # per-frame prior deltas that gate registration
    smoothing_window: float = 1.5  # seconds; 0 disables


@dataclass(frozen=True)
class ImuSample:
    omega: float  # yaw rate, rad/s
    accel: tuple[float, float]  # body-frame (a_x, a_y), m/s^2
    timestamp: float


@dataclass(frozen=True)
class GpsFix:
    position: tuple[float, float]  # local tangent-frame meters
    timestamp: float


@dataclass(frozen=True)
class CompassFix:
    heading: float  # radians
    timestamp: float


@dataclass(frozen=True)
class EkfState:
    mean: np.ndarray  # (8,)
    covariance: np.ndarray  # (8, 8) symmetric positive-definite
    timestamp: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).copy()
        cov = np.asarray(self.covariance, dtype=float).copy()
        if mean.shape != (8,) or cov.shape != (8, 8):
            raise ParameterError("EKF state must be an 8-vector with 8x8 covariance")
        if np.abs(cov - cov.T).max() >= 1e-9:
            raise ParameterError("covariance is not symmetric")
        mean[PSI] = wrap_angle(mean[PSI])
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.mean[PX], self.mean[PY], self.mean[PSI])


def _guard_pd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize; clamp eigenvalues at a floor if definiteness was lost."""
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        warnings.warn("covariance lost positive-definiteness; clamping eigenvalues")
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w, _EIG_FLOOR)
        return 0.5 * ((v * w) @ v.T + ((v * w) @ v.T).T)


def initial_state(
    position: tuple[float, float],
    heading: float,
    velocity: tuple[float, float] = (0.0, 0.0),
    timestamp: float = 0.0,
    cfg: EkfConfig = EkfConfig(),
) -> EkfState:
    mean = np.zeros(8)
    mean[PX], mean[PY] = position
    mean[VX], mean[VY] = velocity
    mean[PSI] = heading
    cov = np.diag(
        [
            cfg.init_pos_sigma**2,
            cfg.init_pos_sigma**2,
            cfg.init_vel_sigma**2,
            cfg.init_vel_sigma**2,
            cfg.init_heading_sigma**2,
            cfg.init_gyro_bias_sigma**2,
            cfg.init_accel_bias_sigma**2,
            cfg.init_accel_bias_sigma**2,
        ]
    )
    return EkfState(mean, cov, timestamp)


def predict(state: EkfState, imu: ImuSample, dt: float, cfg: EkfConfig = EkfConfig()) -> EkfState:
    """Propagate the state through the planar kinematic model.

    Non-finite inputs are rejected: a warning is raised and the unchanged
    state object is returned.
    """
    if dt <= 0:
        raise ParameterError("predict needs dt > 0")
    inputs = np.array([imu.omega, imu.accel[0], imu.accel[1], dt], dtype=float)
    if not (np.isfinite(inputs).all() and np.isfinite(state.mean).all()):
        warnings.warn("non-finite IMU input rejected; state unchanged")
        return state

    x = state.mean.copy()
    psi = x[PSI]
    c, s = np.cos(psi), np.sin(psi)
    ax = imu.accel[0] - x[BAX]
    ay = imu.accel[1] - x[BAY]
    awx = c * ax - s * ay
    awy = s * ax + c * ay

    x_new = x.copy()
    x_new[PX] = x[PX] + x[VX] * dt + 0.5 * awx * dt * dt
    x_new[PY] = x[PY] + x[VY] * dt + 0.5 * awy * dt * dt
    x_new[VX] = x[VX] + awx * dt
    x_new[VY] = x[VY] + awy * dt
    x_new[PSI] = wrap_angle(psi + (imu.omega - x[BW]) * dt)

    F = np.eye(8)
    F[PX, VX] = dt
    F[PY, VY] = dt
    F[PX, PSI] = -0.5 * dt * dt * awy
    F[PY, PSI] = 0.5 * dt * dt * awx
    F[VX, PSI] = -dt * awy
    F[VY, PSI] = dt * awx
    F[PX, BAX] = -0.5 * dt * dt * c
    F[PX, BAY] = 0.5 * dt * dt * s
    F[PY, BAX] = -0.5 * dt * dt * s
    F[PY, BAY] = -0.5 * dt * dt * c
    F[VX, BAX] = -dt * c
    F[VX, BAY] = dt * s
    F[VY, BAX] = -dt * s
    F[VY, BAY] = -dt * c
    F[PSI, BW] = -dt

    G = np.zeros((8, 3))  # control channels: omega, a_x, a_y
    G[PSI, 0] = dt
    G[VX, 1], G[VX, 2] = dt * c, -dt * s
    G[VY, 1], G[VY, 2] = dt * s, dt * c
    G[PX, 1], G[PX, 2] = 0.5 * dt * dt * c, -0.5 * dt * dt * s
    G[PY, 1], G[PY, 2] = 0.5 * dt * dt * s, 0.5 * dt * dt * c
    sigma_u = np.array([cfg.gyro_noise**2, cfg.accel_noise**2, cfg.accel_noise**2])
    Q = (G * sigma_u) @ G.T
    walk = cfg.bias_walk**2 * dt
    Q[BW, BW] += walk
    Q[BAX, BAX] += walk
    Q[BAY, BAY] += walk

    cov = _guard_pd(F @ state.covariance @ F.T + Q)
    return EkfState(x_new, cov, state.timestamp + dt)


def _update_linear(
    state: EkfState, z: np.ndarray, idx: list[int], r_diag: np.ndarray, angular: bool
) -> EkfState:
    H = np.zeros((len(idx), 8))
    for row, i in enumerate(idx):
        H[row, i] = 1.0
    innovation = z - state.mean[idx]
    if angular:
        innovation = wrap_angle(innovation)
    P = state.covariance
    S = H @ P @ H.T + np.diag(r_diag)
    K = P @ H.T @ np.linalg.inv(S)
    mean = state.mean + K @ innovation
    I_KH = np.eye(8) - K @ H
    cov = I_KH @ P @ I_KH.T + K @ np.diag(r_diag) @ K.T  # Joseph form
    return EkfState(mean, _guard_pd(cov), state.timestamp)


def _check_measurement_time(state: EkfState, timestamp: float):
    if timestamp < state.timestamp - 1e-6:
        raise ParameterError(
            f"measurement at t={timestamp} precedes filter time {state.timestamp}"
        )


def update_gps(state: EkfState, fix: GpsFix, cfg: EkfConfig = EkfConfig()) -> EkfState:
    """Position update from a GPS fix."""
    _check_measurement_time(state, fix.timestamp)
    z = np.array(fix.position, dtype=float)
    r = np.array([cfg.gps_sigma**2, cfg.gps_sigma**2])
    return _update_linear(state, z, [PX, PY], r, angular=False)


def update_compass(state: EkfState, fix: CompassFix, cfg: EkfConfig = EkfConfig()) -> EkfState:
    """Heading update; the innovation is wrapped before the gain applies."""
    _check_measurement_time(state, fix.timestamp)
    z = np.array([fix.heading], dtype=float)
    r = np.array([cfg.compass_sigma**2])
    return _update_linear(state, z, [PSI], r, angular=True)


@dataclass(frozen=True)
class PriorTrajectory:
    """Per-frame pose priors sampled from the filtered trajectory."""

    t: np.ndarray  # (n,) frame timestamps
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for name in ("t", "x", "y", "theta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.t.size
        if not (self.x.size == self.y.size == self.theta.size == n):
            raise ParameterError("trajectory arrays must have equal length")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def __len__(self) -> int:
        return int(self.t.size)

    def pose(self, i: int) -> Pose2D:
        return Pose2D(self.x[i], self.y[i], self.theta[i])

    def as_poses(self) -> list[Pose2D]:
        return [self.pose(i) for i in range(len(self))]

    def subset(self, indices) -> "PriorTrajectory":
        idx = np.asarray(indices, dtype=int)
        return PriorTrajectory(self.t[idx], self.x[idx], self.y[idx], self.theta[idx])

    def delta(self, i: int, j: int) -> tuple[np.ndarray, float]:
        """World-frame relative motion (position delta, wrapped heading delta)."""
        dp = np.array([self.x[j] - self.x[i], self.y[j] - self.y[i]])
        return dp, wrap_angle(self.theta[j] - self.theta[i])


def _fit_initial_motion(gps: np.ndarray, t0: float, cfg: EkfConfig):
    """Seed position/velocity from a linear fit over the leading GPS fixes.

    Offline processing can look ahead, which avoids a long velocity
    transient that would otherwise corrupt the early trajectory. Returns
    the fitted state at t0 plus honest (position, velocity) sigmas, or
    None sigmas when there are too few fixes to fit.
    """
    k = min(gps.shape[0], 6)
    if k < 2 or gps[k - 1, 0] <= gps[0, 0]:
        return tuple(gps[0, 1:3]), (0.0, 0.0), None
    t = gps[:k, 0] - t0
    design = np.stack([np.ones(k), t], axis=1)
    coef, *_ = np.linalg.lstsq(design, gps[:k, 1:3], rcond=None)
    position0 = (float(coef[0, 0]), float(coef[0, 1]))
    velocity0 = (float(coef[1, 0]), float(coef[1, 1]))
    # parameter sigmas of the straight-line fit under the GPS noise model
    gram_inv = np.linalg.inv(design.T @ design)
    pos_sigma = max(cfg.gps_sigma * np.sqrt(gram_inv[0, 0]), 0.05)
    vel_sigma = max(cfg.gps_sigma * np.sqrt(gram_inv[1, 1]), 0.05)
    return position0, velocity0, (pos_sigma, vel_sigma)


# event priorities at equal timestamps: predict, then GPS, then compass
_PRIORITY = {"imu": 0, "gps": 1, "compass": 2}


def fuse_trajectory(
    imu: np.ndarray,
    gps: np.ndarray,
    compass: np.ndarray,
    frame_times: np.ndarray,
    cfg: EkfConfig = EkfConfig(),
) -> PriorTrajectory:
    """Run the filter over merged sensor streams and sample at frame times.

    Streams are arrays: imu (n, 4) of t/omega/ax/ay, gps (m, 3) of t/x/y,
    compass (k, 2) of t/heading. Filtered poses are linearly interpolated
    (headings along the shortest arc) at the requested frame times; times
    outside coverage clamp to the nearest filtered pose with a warning.
    """
    imu = np.atleast_2d(np.asarray(imu, dtype=float)) if np.size(imu) else np.zeros((0, 4))
    gps = np.atleast_2d(np.asarray(gps, dtype=float)) if np.size(gps) else np.zeros((0, 3))
    compass = (
        np.atleast_2d(np.asarray(compass, dtype=float)) if np.size(compass) else np.zeros((0, 2))
    )
    if gps.shape[0] == 0:
        raise ParameterError("fusion needs at least one GPS fix to anchor the trajectory")
    for stream, name in ((imu, "imu"), (gps, "gps"), (compass, "compass")):
        if stream.shape[0] > 1 and not (np.diff(stream[:, 0]) > 0).all():
            raise ParameterError(f"{name} timestamps must be strictly increasing")

    events = []
    for row in imu:
        events.append((row[0], _PRIORITY["imu"], "imu", row))
    for row in gps:
        events.append((row[0], _PRIORITY["gps"], "gps", row))
    for row in compass:
        events.append((row[0], _PRIORITY["compass"], "compass", row))
    events.sort(key=lambda e: (e[0], e[1]))

    heading0 = compass[0, 1] if compass.shape[0] else 0.0
    t0 = events[0][0]
    position0, velocity0, fit_sigmas = _fit_initial_motion(gps, t0, cfg)
    state = initial_state(position0, heading0, velocity0, timestamp=t0, cfg=cfg)
    if fit_sigmas is not None:
        cov = np.array(state.covariance)
        cov[PX, PX] = cov[PY, PY] = fit_sigmas[0] ** 2
        cov[VX, VX] = cov[VY, VY] = fit_sigmas[1] ** 2
        state = EkfState(state.mean, cov, state.timestamp)

    trace_t, trace_x, trace_y, trace_h = [t0], [state.mean[PX]], [state.mean[PY]], [state.mean[PSI]]
    for t, _, kind, row in events:
        if kind == "imu":
            dt = t - state.timestamp
            if dt > 0:
                state = predict(state, ImuSample(row[1], (row[2], row[3]), t), dt, cfg)
        elif kind == "gps":
            state = update_gps(state, GpsFix((row[1], row[2]), t), cfg)
        else:
            state = update_compass(state, CompassFix(row[1], t), cfg)
        trace_t.append(state.timestamp)
        trace_x.append(state.mean[PX])
        trace_y.append(state.mean[PY])
        trace_h.append(state.mean[PSI])

    trace_t = np.asarray(trace_t)
    frame_times = np.asarray(frame_times, dtype=float)
    if frame_times.size and (
        frame_times.min() < trace_t[0] - 1e-9 or frame_times.max() > trace_t[-1] + 1e-9
    ):
        warnings.warn("frame times outside sensor coverage; clamping to nearest filtered pose")
    # duplicate trace timestamps (several updates at one instant): keep the last
    keep = np.concatenate([np.diff(trace_t) > 0, [True]])
    trace_t = trace_t[keep]
    xs = np.asarray(trace_x)[keep]
    ys = np.asarray(trace_y)[keep]
    hs = np.asarray(trace_h)[keep]

    x_f = np.interp(frame_times, trace_t, xs)
    y_f = np.interp(frame_times, trace_t, ys)
    h_f = interp_headings(frame_times, trace_t, hs)
    if cfg.smoothing_window > 0 and frame_times.size > 2:
        dt = np.median(np.diff(frame_times)) if frame_times.size > 1 else 0.0
        if dt > 0:
            half = int(round(0.5 * cfg.smoothing_window / dt))
            x_f = _smooth_symmetric(x_f, half)
            y_f = _smooth_symmetric(y_f, half)
            h_f = wrap_angle(_smooth_symmetric(np.unwrap(h_f), half))
    return PriorTrajectory(frame_times, x_f, y_f, h_f)


def _smooth_symmetric(values: np.ndarray, half_width: int) -> np.ndarray:
    """Centered moving average with a window that shrinks near the ends.

    The window stays symmetric everywhere, so linear sequences pass
    through unchanged.
    """
    if half_width < 1:
        return values
    n = values.size
    out = np.empty_like(values)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(n):
        h = min(half_width, i, n - 1 - i)
        out[i] = (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)
    return out
