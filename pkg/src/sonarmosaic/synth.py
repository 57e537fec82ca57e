"""Synthetic seabeds, simulated sonar frames, and noisy sensor streams.

The generator provides metric ground truth (scene, trajectory, sensor
biases) so every pipeline stage can be scored without field hardware.
Everything is deterministic under a fixed seed; per-frame randomness uses
seeds derived from (seed, frame index).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .angles import wrap_angle
from .frames import ParameterError, Pose2D, PolarFrame, SonarGeometry


@dataclass(frozen=True)
class QuadratLayout:
    """Square seabed frames of known side length arranged in rows."""

    centers: np.ndarray  # (n, 2) world meters
    side_lengths: np.ndarray  # (n,)
    row_index: np.ndarray  # (n,) which row each quadrat belongs to

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        s = np.atleast_1d(np.asarray(self.side_lengths, dtype=float))
        r = np.atleast_1d(np.asarray(self.row_index, dtype=int))
        if c.shape[0] != s.shape[0] or c.shape[0] != r.shape[0]:
            raise ParameterError("layout arrays must have one entry per quadrat")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "side_lengths", s)
        object.__setattr__(self, "row_index", r)

    def __len__(self) -> int:
        return self.centers.shape[0]


def default_quadrat_layout() -> QuadratLayout:
    """2x4 array: one row of 0.43 m squares, one of 0.62 m squares.

    Rows run east-west with centers 1 m apart; the rows' nearest edges are
    1.52 m apart, and the whole array is centered on the world origin.
    """
    side_a, side_b = 0.43, 0.62
    edge_gap = 1.52
    xs = np.array([-1.5, -0.5, 0.5, 1.5])
    # center-to-center row separation = gap between nearest edges + half sides
    dy = edge_gap + 0.5 * (side_a + side_b)
    y_a, y_b = 0.5 * dy, -0.5 * dy
    centers = np.concatenate(
        [np.stack([xs, np.full(4, y_a)], axis=1), np.stack([xs, np.full(4, y_b)], axis=1)]
    )
    sides = np.array([side_a] * 4 + [side_b] * 4)
    rows = np.array([0] * 4 + [1] * 4)
    return QuadratLayout(centers, sides, rows)


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth seabed description."""

    extent: tuple[float, float] = (24.0, 24.0)  # (width, height) meters, centered on origin
    pixel_scale: float = 0.02  # meters per scene pixel
    background_length_scale: float = 0.12  # correlation length of texture, meters
    background_mean: float = 0.35
    background_contrast: float = 0.12
    layout: QuadratLayout = field(default_factory=default_quadrat_layout)
    outline_value: float = 0.95
    line_width: float = 0.05  # quadrat outline stroke, meters
    clutter_density: float = 18.0  # oyster-like speckles per square meter of quadrat
    clutter_value_range: tuple[float, float] = (0.65, 0.9)
    clutter_radius_range: tuple[float, float] = (0.02, 0.05)
    # shell/debris texture of the worked study area (registration anchors);
    # the surrounding seabed stays feature-poor, as at a real farm site
    field_clutter_density: float = 2.5
    field_clutter_value_range: tuple[float, float] = (0.55, 0.85)
    field_clutter_radius: float = 4.5  # meters around the scene center


@dataclass(frozen=True)
class SeabedScene:
    """Rasterized ground-truth reflectivity with georeferencing."""

    reflectivity: np.ndarray  # (H, W) in [0, 1]
    origin: tuple[float, float]  # world (x, y) of pixel (0, 0)
    pixel_scale: float

    def sample_world(self, x, y) -> np.ndarray:
        """Bilinear reflectivity at world points; zero outside the scene."""
        cols = (np.asarray(x, dtype=float) - self.origin[0]) / self.pixel_scale
        rows = (np.asarray(y, dtype=float) - self.origin[1]) / self.pixel_scale
        return map_coordinates(self.reflectivity, [rows, cols], order=1, mode="constant", cval=0.0)


def generate_scene(spec: SceneSpec, seed: int) -> SeabedScene:
    """Render the ground-truth reflectivity grid for a scene spec."""
    w_m, h_m = spec.extent
    layout = spec.layout
    if len(layout):
        margin = 0.5 * layout.side_lengths.max() + spec.line_width
        if (np.abs(layout.centers[:, 0]) + margin > 0.5 * w_m).any() or (
            np.abs(layout.centers[:, 1]) + margin > 0.5 * h_m
        ).any():
            raise ParameterError("quadrat layout extends outside the scene extent")

    rng = np.random.default_rng(seed)
    n_cols = int(round(w_m / spec.pixel_scale)) + 1
    n_rows = int(round(h_m / spec.pixel_scale)) + 1
    origin = (-0.5 * w_m, -0.5 * h_m)

    noise = rng.standard_normal((n_rows, n_cols))
    sigma_px = max(spec.background_length_scale / spec.pixel_scale, 1e-6)
    texture = gaussian_filter(noise, sigma=sigma_px)
    std = texture.std()
    if std > 0:
        texture /= std
    grid = np.clip(spec.background_mean + spec.background_contrast * texture, 0.0, 1.0)

    x = origin[0] + np.arange(n_cols) * spec.pixel_scale
    y = origin[1] + np.arange(n_rows) * spec.pixel_scale
    xx = x[None, :]
    yy = y[:, None]

    def stamp_ellipse(cx, cy, ax_r, by_r, ang, val):
        reach = max(ax_r, by_r)
        c0, c1 = np.searchsorted(x, [cx - reach, cx + reach])
        r0, r1 = np.searchsorted(y, [cy - reach, cy + reach])
        if c0 >= c1 or r0 >= r1:
            return
        u0 = xx[:, c0:c1] - cx
        v0 = yy[r0:r1] - cy
        ca, sa = np.cos(ang), np.sin(ang)
        u = ca * u0 + sa * v0
        v = -sa * u0 + ca * v0
        inside = (u / ax_r) ** 2 + (v / by_r) ** 2 <= 1.0
        grid[r0:r1, c0:c1][inside] = val

    def random_ellipse(cx, cy, value_range):
        stamp_ellipse(
            cx,
            cy,
            rng.uniform(*spec.clutter_radius_range),
            rng.uniform(*spec.clutter_radius_range),
            rng.uniform(0.0, np.pi),
            rng.uniform(*value_range),
        )

    r_field = min(spec.field_clutter_radius, 0.5 * min(w_m, h_m))
    n_field = rng.poisson(spec.field_clutter_density * np.pi * r_field**2)
    for _ in range(n_field):
        radius = r_field * np.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * np.pi)
        random_ellipse(
            radius * np.cos(angle), radius * np.sin(angle), spec.field_clutter_value_range
        )

    for center, side in zip(layout.centers, layout.side_lengths):
        # Chebyshev ring of the square boundary
        d = np.maximum(np.abs(xx - center[0]), np.abs(yy - center[1]))
        ring = np.abs(d - 0.5 * side) <= 0.5 * spec.line_width
        grid[ring] = spec.outline_value

        interior = side - spec.line_width
        n_clutter = rng.poisson(spec.clutter_density * interior * interior)
        for _ in range(n_clutter):
            cx, cy = center + rng.uniform(-0.5, 0.5, size=2) * (interior - 0.1)
            random_ellipse(cx, cy, spec.clutter_value_range)

    return SeabedScene(grid, origin, spec.pixel_scale)


@dataclass(frozen=True)
class SensorNoiseSpec:
    """Noise model for the simulated sensor suite."""

    gps_rate: float = 2.0
    gps_sigma: float = 1.5  # meters per axis (stationary std)
    gps_correlation_time: float = 0.0  # s; Gauss-Markov error wander, 0 = white
    gps_quantization: float = 0.0  # meters; 0 disables
    imu_rate: float = 55.0
    imu_omega_sigma: float = 0.0
    imu_accel_sigma: float = 0.0
    imu_omega_bias: float = 0.0
    imu_accel_bias: tuple[float, float] = (0.0, 0.0)
    compass_rate: float = 2.0
    compass_sigma: float = 0.0
    sonar_speckle_sigma: float = 0.0  # lognormal multiplicative
    sonar_additive_sigma: float = 0.0

    def __post_init__(self):
        for rate in (self.gps_rate, self.imu_rate, self.compass_rate):
            if rate <= 0:
                raise ParameterError("sensor rates must be positive")
        for sigma in (
            self.gps_sigma,
            self.imu_omega_sigma,
            self.imu_accel_sigma,
            self.compass_sigma,
            self.sonar_speckle_sigma,
            self.sonar_additive_sigma,
        ):
            if sigma < 0:
                raise ParameterError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class TrajectorySpec:
    pattern: str = "lawnmower"  # lawnmower | straight | circle
    speed: float = 0.5  # m/s
    leg_spacing: float = 1.6  # m; circle radius for the circle pattern
    leg_length: float = 3.5  # m, lawnmower legs
    duration: float = 20.0  # s
    start: tuple[float, float] = (-1.75, -0.8)
    start_heading: float = 0.0

    def __post_init__(self):
        if self.speed <= 0 or self.duration <= 0:
            raise ParameterError("speed and duration must be positive")
        if self.pattern not in ("lawnmower", "straight", "circle"):
            raise ParameterError(f"unknown trajectory pattern {self.pattern!r}")


@dataclass(frozen=True)
class _Segment:
    kind: str  # "line" | "arc"
    t0: float
    length: float  # seconds
    x0: float
    y0: float
    heading0: float
    omega: float = 0.0  # arc only


class Trajectory:
    """Piecewise line/arc path with analytic kinematics."""

    def __init__(self, segments: list[_Segment], speed: float, duration: float):
        self.segments = segments
        self.speed = speed
        self.duration = duration
        self._starts = np.array([s.t0 for s in segments])

    def _segment_at(self, t: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._starts, t, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def state(self, t) -> dict[str, np.ndarray]:
        """Pose and body-frame kinematics at times t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = self._segment_at(t)
        x = np.empty_like(t)
        y = np.empty_like(t)
        heading = np.empty_like(t)
        omega = np.zeros_like(t)
        ay_body = np.zeros_like(t)
        v = self.speed
        for k, seg in enumerate(self.segments):
            sel = idx == k
            if not sel.any():
                continue
            dt = np.clip(t[sel] - seg.t0, 0.0, seg.length)
            if seg.kind == "line":
                x[sel] = seg.x0 + v * dt * np.cos(seg.heading0)
                y[sel] = seg.y0 + v * dt * np.sin(seg.heading0)
                heading[sel] = seg.heading0
            else:
                r = v / abs(seg.omega)
                side = np.sign(seg.omega)
                # turn center sits 90 deg to the turning side of the heading
                cx = seg.x0 - r * side * np.sin(seg.heading0)
                cy = seg.y0 + r * side * np.cos(seg.heading0)
                alpha0 = np.arctan2(seg.y0 - cy, seg.x0 - cx)
                alpha = alpha0 + seg.omega * dt
                x[sel] = cx + r * np.cos(alpha)
                y[sel] = cy + r * np.sin(alpha)
                heading[sel] = seg.heading0 + seg.omega * dt
                omega[sel] = seg.omega
                ay_body[sel] = v * seg.omega
        return {
            "x": x,
            "y": y,
            "heading": heading,
            "omega": omega,
            "ax_body": np.zeros_like(t),
            "ay_body": ay_body,
            "vx": v * np.cos(heading),
            "vy": v * np.sin(heading),
        }

    def poses(self, t) -> list[Pose2D]:
        st = self.state(t)
        return [
            Pose2D(xi, yi, wrap_angle(hi)) for xi, yi, hi in zip(st["x"], st["y"], st["heading"])
        ]


def build_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Construct the analytic path for a trajectory spec."""
    v = spec.speed
    segments: list[_Segment] = []
    if spec.pattern == "straight":
        segments.append(
            _Segment("line", 0.0, spec.duration, spec.start[0], spec.start[1], spec.start_heading)
        )
    elif spec.pattern == "circle":
        r = spec.leg_spacing
        if r <= 0:
            raise ParameterError("circle radius (leg_spacing) must be positive")
        segments.append(
            _Segment(
                "arc", 0.0, spec.duration, spec.start[0], spec.start[1], spec.start_heading, v / r
            )
        )
    else:
        # lawnmower: straight legs joined by half-circle turns, alternating direction
        r = 0.5 * spec.leg_spacing
        leg_time = spec.leg_length / v
        turn_time = np.pi * r / v
        t = 0.0
        x, y, heading = spec.start[0], spec.start[1], spec.start_heading
        turn_left = True
        while t < spec.duration:
            segments.append(_Segment("line", t, leg_time, x, y, heading))
            x += spec.leg_length * np.cos(heading)
            y += spec.leg_length * np.sin(heading)
            t += leg_time
            if t >= spec.duration:
                break
            side = 1.0 if turn_left else -1.0
            segments.append(_Segment("arc", t, turn_time, x, y, heading, side * v / r))
            # a half circle reverses the heading and offsets one spacing sideways
            x += -side * spec.leg_spacing * np.sin(heading)
            y += side * spec.leg_spacing * np.cos(heading)
            heading = heading + side * np.pi
            t += turn_time
            turn_left = not turn_left
    return Trajectory(segments, v, spec.duration)


def simulate_frame(
    scene: SeabedScene,
    pose: Pose2D,
    geometry: SonarGeometry,
    noise: SensorNoiseSpec,
    seed,
    timestamp: float = 0.0,
    gain_reference_range: float | None = None,
) -> PolarFrame:
    """Forward-model one polar sonar frame at a world pose.

    Each (bin, beam) cell samples the scene reflectivity at its world
    point, attenuated by a 1/r gain normalized to 1 at the reference
    range, then degraded by lognormal speckle and additive Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    ranges = geometry.range_of_bin(np.arange(geometry.n_bins))[:, None]
    bearings = geometry.bearing_of_beam(np.arange(geometry.n_beams))[None, :]
    local_x = ranges * np.cos(bearings)
    local_y = ranges * np.sin(bearings)
    world = pose.world_from_local(np.stack([local_x, local_y], axis=-1))
    refl = scene.sample_world(world[..., 0], world[..., 1])

    r0 = gain_reference_range if gain_reference_range is not None else 0.25 * geometry.max_range
    gain = r0 / np.maximum(ranges, r0)
    out = refl * gain
    if noise.sonar_speckle_sigma > 0:
        out = out * np.exp(rng.normal(0.0, noise.sonar_speckle_sigma, out.shape))
    if noise.sonar_additive_sigma > 0:
        out = out + rng.normal(0.0, noise.sonar_additive_sigma, out.shape)
    return PolarFrame(geometry, np.clip(out, 0.0, 1.0), timestamp)


@dataclass(frozen=True)
class SensorStreams:
    """Time-stamped simulated sensor measurements."""

    imu: np.ndarray  # (n, 4): t, omega, ax, ay
    gps: np.ndarray  # (m, 3): t, x, y
    compass: np.ndarray  # (k, 2): t, heading


def simulate_sensors(traj: Trajectory, noise: SensorNoiseSpec, seed: int) -> SensorStreams:
    """Generate IMU/GPS/compass streams with configured noise and biases."""
    rng = np.random.default_rng(seed)
    duration = traj.duration

    t_imu = np.arange(0.0, duration, 1.0 / noise.imu_rate)
    st = traj.state(t_imu)
    omega = st["omega"] + noise.imu_omega_bias
    ax = st["ax_body"] + noise.imu_accel_bias[0]
    ay = st["ay_body"] + noise.imu_accel_bias[1]
    if noise.imu_omega_sigma > 0:
        omega = omega + rng.normal(0.0, noise.imu_omega_sigma, t_imu.shape)
    if noise.imu_accel_sigma > 0:
        ax = ax + rng.normal(0.0, noise.imu_accel_sigma, t_imu.shape)
        ay = ay + rng.normal(0.0, noise.imu_accel_sigma, t_imu.shape)
    imu = np.stack([t_imu, omega, ax, ay], axis=1)

    t_gps = np.arange(0.0, duration, 1.0 / noise.gps_rate)
    st = traj.state(t_gps)
    gx = st["x"].copy()
    gy = st["y"].copy()
    if noise.gps_sigma > 0:
        if noise.gps_correlation_time > 0:
            # first-order Gauss-Markov wander with the stationary sigma
            rho = np.exp(-1.0 / (noise.gps_rate * noise.gps_correlation_time))
            drive = np.sqrt(1.0 - rho * rho)
            err = rng.normal(0.0, noise.gps_sigma, (t_gps.size, 2))
            for k in range(1, t_gps.size):
                err[k] = rho * err[k - 1] + drive * err[k]
            gx += err[:, 0]
            gy += err[:, 1]
        else:
            gx += rng.normal(0.0, noise.gps_sigma, t_gps.shape)
            gy += rng.normal(0.0, noise.gps_sigma, t_gps.shape)
    if noise.gps_quantization > 0:
        q = noise.gps_quantization
        gx = np.round(gx / q) * q
        gy = np.round(gy / q) * q
    gps = np.stack([t_gps, gx, gy], axis=1)

    t_cmp = np.arange(0.0, duration, 1.0 / noise.compass_rate)
    st = traj.state(t_cmp)
    heading = st["heading"].copy()
    if noise.compass_sigma > 0:
        heading = heading + rng.normal(0.0, noise.compass_sigma, t_cmp.shape)
    compass = np.stack([t_cmp, wrap_angle(heading)], axis=1)
    return SensorStreams(imu, gps, compass)


@dataclass
class SyntheticDataset:
    """In-memory synthetic survey: scene, frames, sensors, and truth."""

    scene: SeabedScene
    geometry: SonarGeometry
    frames: list[PolarFrame]
    frame_times: np.ndarray
    true_poses: list[Pose2D]
    streams: SensorStreams
    layout: QuadratLayout
    seed: int


def generate_dataset(
    scene_spec: SceneSpec,
    traj_spec: TrajectorySpec,
    noise: SensorNoiseSpec,
    geometry: SonarGeometry,
    seed: int,
) -> SyntheticDataset:
    """Simulate a full survey: frames at the sonar rate plus sensor streams."""
    scene = generate_scene(scene_spec, seed)
    traj = build_trajectory(traj_spec)
    frame_times = np.arange(0.0, traj_spec.duration, 1.0 / geometry.frame_rate)
    true_poses = traj.poses(frame_times)
    frames = [
        simulate_frame(scene, pose, geometry, noise, seed=[seed, i], timestamp=float(t))
        for i, (pose, t) in enumerate(zip(true_poses, frame_times))
    ]
    streams = simulate_sensors(traj, noise, seed=[seed, 10**6])
    return SyntheticDataset(
        scene, geometry, frames, frame_times, true_poses, streams, scene_spec.layout, seed
    )
