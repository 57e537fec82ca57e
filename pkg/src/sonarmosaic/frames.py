"""Sonar frame containers, fan geometry, and resampling shared by all stages.

Conventions used everywhere in the package:

* World frame: x east, y north, headings counterclockwise from +x.
* Frame-local frame: x forward along the acoustic axis, y 90 deg
  counterclockwise from it; the apex (sonar origin) is the local origin.
* Pixel grids: element ``[iy, ix]`` of a Cartesian frame sits at local
  ``((ix - apex_col) * s, (iy - apex_row) * s)``; element ``[iy, ix]`` of a
  mosaic canvas sits at world ``(origin_x + ix * s, origin_y + iy * s)``.
* Polar grids: bin ``k`` is at range ``k * max_range / n_bins``, beam ``j``
  at bearing ``-fov/2 + j * fov / n_beams`` (grid-point convention, edge
  clamped when interpolating).

Intensity grids are unit-interval floats. Bilinear interpolation is used
for intensities, nearest-neighbor for validity masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.ndimage import map_coordinates

from .angles import wrap_angle

# Sentinel for canvas pixels no frame has touched; outside [0, 1] on purpose.
EMPTY_VALUE = -1.0


class ParameterError(ValueError):
    """Invalid argument to a pipeline operation."""


@dataclass(frozen=True)
class SonarGeometry:
    """Fan geometry of the imaging sonar."""

    fov: float  # full horizontal aperture, radians
    max_range: float  # meters
    n_beams: int
    n_bins: int
    frame_rate: float = 10.0  # Hz

    def __post_init__(self):
        if not (0.0 < self.fov <= np.pi):
            raise ParameterError(f"fov must be in (0, pi], got {self.fov}")
        if self.max_range <= 0:
            raise ParameterError("max_range must be positive")
        if self.n_beams < 2 or self.n_bins < 2:
            raise ParameterError("need at least 2 beams and 2 bins")
        if self.frame_rate <= 0:
            raise ParameterError("frame_rate must be positive")

    @property
    def bin_spacing(self) -> float:
        return self.max_range / self.n_bins

    @property
    def beam_spacing(self) -> float:
        return self.fov / self.n_beams

    def bearing_of_beam(self, beam_index) -> np.ndarray:
        return -0.5 * self.fov + np.asarray(beam_index) * self.beam_spacing

    def range_of_bin(self, bin_index) -> np.ndarray:
        return np.asarray(bin_index) * self.bin_spacing


@dataclass(frozen=True)
class PolarFrame:
    """Raw or processed sonar intensities in (range bin x beam) coordinates."""

    geometry: SonarGeometry
    intensities: np.ndarray  # (n_bins, n_beams), values in [0, 1]
    timestamp: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=float)
        if arr.shape != (self.geometry.n_bins, self.geometry.n_beams):
            raise ParameterError(
                f"intensity grid {arr.shape} does not match geometry "
                f"({self.geometry.n_bins}, {self.geometry.n_beams})"
            )
        if not np.isfinite(arr).all():
            raise ParameterError("intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ParameterError("intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", arr)

    def with_intensities(self, intensities: np.ndarray) -> "PolarFrame":
        return PolarFrame(self.geometry, intensities, self.timestamp)


@dataclass(frozen=True)
class CartesianFrame:
    """Fan-shaped image in metric pixels with a validity mask.

    ``apex`` is the (row, col) pixel position of the sonar origin. Pixels
    outside the mask are forced to zero at construction.
    """

    pixels: np.ndarray  # (H, W) floats in [0, 1]
    valid_mask: np.ndarray  # (H, W) bools
    pixel_scale: float  # meters per pixel
    apex: tuple[float, float]  # (row, col)
    timestamp: float = 0.0

    def __post_init__(self):
        if self.pixel_scale <= 0:
            raise ParameterError("pixel_scale must be positive")
        px = np.asarray(self.pixels, dtype=float)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if px.shape != mask.shape:
            raise ParameterError("pixels and valid_mask shapes differ")
        px = np.where(mask, px, 0.0)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def local_xy_of_pixels(self, rows, cols):
        """Metric local coordinates of pixel centers."""
        x = (np.asarray(cols, dtype=float) - self.apex[1]) * self.pixel_scale
        y = (np.asarray(rows, dtype=float) - self.apex[0]) * self.pixel_scale
        return x, y

    def pixels_of_local_xy(self, x, y):
        """Fractional (row, col) pixel coordinates of local metric points."""
        cols = np.asarray(x, dtype=float) / self.pixel_scale + self.apex[1]
        rows = np.asarray(y, dtype=float) / self.pixel_scale + self.apex[0]
        return rows, cols


@dataclass(frozen=True)
class Pose2D:
    """Planar pose; theta is always wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.theta):
            if not np.isfinite(v):
                raise ParameterError("pose components must be finite")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def world_from_local(self, local_xy: np.ndarray) -> np.ndarray:
        """Map (..., 2) local points into the world frame."""
        p = np.asarray(local_xy, dtype=float)
        c, s = np.cos(self.theta), np.sin(self.theta)
        out = np.empty_like(p)
        out[..., 0] = self.x + c * p[..., 0] - s * p[..., 1]
        out[..., 1] = self.y + s * p[..., 0] + c * p[..., 1]
        return out

    def local_from_world(self, world_xy: np.ndarray) -> np.ndarray:
        p = np.asarray(world_xy, dtype=float)
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx = p[..., 0] - self.x
        dy = p[..., 1] - self.y
        out = np.empty_like(p)
        out[..., 0] = c * dx + s * dy
        out[..., 1] = -s * dx + c * dy
        return out

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Pose of ``other`` expressed through this pose (this applied after)."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2D":
        c, s = np.cos(self.theta), np.sin(self.theta)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)


@dataclass
class PlacedLayer:
    """One frame warped onto a canvas, cropped to its bounding box."""

    frame_index: int
    row0: int
    col0: int
    intensity: np.ndarray  # float32 (h, w)
    valid: np.ndarray  # bool (h, w)
    score: np.ndarray | None = None  # float32 (h, w), feature scores

    @property
    def empty(self) -> bool:
        return self.valid.size == 0 or not bool(self.valid.any())

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass
class MosaicCanvas:
    """Georeferenced accumulation grid for warped frames and the blended map."""

    origin: tuple[float, float]  # world (x, y) of pixel (0, 0)
    pixel_scale: float
    shape: tuple[int, int]
    layers: list[PlacedLayer] = field(default_factory=list)
    blended: np.ndarray | None = None

    def __post_init__(self):
        if self.pixel_scale <= 0:
            raise ParameterError("pixel_scale must be positive")
        if self.blended is None:
            self.blended = np.full(self.shape, EMPTY_VALUE, dtype=float)

    def world_to_pixel(self, world_xy: np.ndarray) -> np.ndarray:
        """Fractional (col, row)... returns (..., 2) array of (ix, iy)."""
        p = np.asarray(world_xy, dtype=float)
        out = np.empty_like(p)
        out[..., 0] = (p[..., 0] - self.origin[0]) / self.pixel_scale
        out[..., 1] = (p[..., 1] - self.origin[1]) / self.pixel_scale
        return out

    def pixel_to_world(self, cols, rows):
        x = self.origin[0] + np.asarray(cols, dtype=float) * self.pixel_scale
        y = self.origin[1] + np.asarray(rows, dtype=float) * self.pixel_scale
        return x, y

    def add_layer(self, layer: PlacedLayer) -> None:
        """Single mutation point; callers must serialize access."""
        self.layers.append(layer)

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.shape, dtype=bool)
        for layer in self.layers:
            if layer.empty:
                continue
            h, w = layer.shape
            cov[layer.row0 : layer.row0 + h, layer.col0 : layer.col0 + w] |= layer.valid
        return cov


def canvas_for_poses(
    poses, max_range: float, pixel_scale: float, pad: float = 0.0
) -> MosaicCanvas:
    """Auto-size a canvas to the bounding box of poses padded by max_range."""
    xs = np.array([p.x for p in poses], dtype=float)
    ys = np.array([p.y for p in poses], dtype=float)
    if xs.size == 0:
        raise ParameterError("need at least one pose to size a canvas")
    margin = max_range + pad
    x0, y0 = xs.min() - margin, ys.min() - margin
    x1, y1 = xs.max() + margin, ys.max() + margin
    w = int(np.ceil((x1 - x0) / pixel_scale)) + 1
    h = int(np.ceil((y1 - y0) / pixel_scale)) + 1
    return MosaicCanvas(origin=(x0, y0), pixel_scale=pixel_scale, shape=(h, w))


def polar_to_cartesian(frame: PolarFrame, pixel_scale: float) -> CartesianFrame:
    """Resample a polar frame onto a metric fan-shaped Cartesian grid.

    Pixels whose (range, bearing) fall outside the fan are masked invalid
    and zeroed. Interior pixels are bilinearly sampled from the polar grid
    with edge clamping.
    """
    if pixel_scale <= 0:
        raise ParameterError("pixel_scale must be positive")
    geom = frame.geometry
    half_width = geom.max_range * np.sin(0.5 * geom.fov)
    n_cols = int(np.ceil(geom.max_range / pixel_scale)) + 1
    half_rows = int(np.ceil(half_width / pixel_scale))
    n_rows = 2 * half_rows + 1
    apex = (float(half_rows), 0.0)

    cols = np.arange(n_cols, dtype=float)
    rows = np.arange(n_rows, dtype=float)
    x = (cols - apex[1])[None, :] * pixel_scale
    y = (rows - apex[0])[:, None] * pixel_scale
    r = np.hypot(x, y)
    bearing = np.arctan2(y, x)

    tol = 1e-12
    mask = (r <= geom.max_range + tol) & (np.abs(bearing) <= 0.5 * geom.fov + tol)

    bin_f = np.clip(r / geom.bin_spacing, 0.0, geom.n_bins - 1.0)
    beam_f = np.clip((bearing + 0.5 * geom.fov) / geom.beam_spacing, 0.0, geom.n_beams - 1.0)
    sampled = map_coordinates(frame.intensities, [bin_f, beam_f], order=1, mode="nearest")
    sampled = np.where(mask, sampled, 0.0)
    return CartesianFrame(sampled, mask, pixel_scale, apex, frame.timestamp)


def _sample_layer(frame: CartesianFrame, frame_rows, frame_cols, scores=None):
    """Mask-aware bilinear sampling of a frame at fractional pixel coords.

    Intensities are sampled with mask premultiplication so invalid source
    pixels contribute nothing; the mask itself is transported
    nearest-neighbor. Channels are packed into one cv2.remap call.
    """
    maskf = frame.valid_mask.astype(np.float32)
    map_x = np.ascontiguousarray(frame_cols, dtype=np.float32)
    map_y = np.ascontiguousarray(frame_rows, dtype=np.float32)
    channels = [maskf, (frame.pixels * maskf).astype(np.float32)]
    if scores is not None:
        channels.append((scores * maskf).astype(np.float32))
    packed = np.stack(channels, axis=-1)
    sampled = cv2.remap(
        packed, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0
    )
    if sampled.ndim == 2:
        sampled = sampled[..., None]
    nn_mask = (
        cv2.remap(
            frame.valid_mask.astype(np.uint8),
            map_x,
            map_y,
            cv2.INTER_NEAREST,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=0,
        )
        > 0
    )
    weight = sampled[..., 0].astype(float)
    good = nn_mask & (weight > 1e-6)
    safe = np.where(good, weight, 1.0)
    intensity = np.where(good, sampled[..., 1] / safe, 0.0)
    out_scores = None
    if scores is not None:
        out_scores = np.where(good, sampled[..., 2] / safe, 0.0)
    return intensity, good, out_scores


def warp_to_canvas(
    frame: CartesianFrame,
    pose: Pose2D,
    canvas: MosaicCanvas,
    scores: np.ndarray | None = None,
    frame_index: int = 0,
) -> PlacedLayer:
    """Warp a frame onto canvas pixels at the given world pose.

    The frame is rotated by ``pose.theta`` and translated so its apex lands
    at world ``(pose.x, pose.y)``. A frame entirely outside the canvas
    yields an empty layer, not an error.
    """
    if abs(canvas.pixel_scale - frame.pixel_scale) > 1e-12:
        raise ParameterError("canvas and frame pixel scales must match")
    h, w = frame.shape
    corner_rows = np.array([0.0, 0.0, h - 1.0, h - 1.0])
    corner_cols = np.array([0.0, w - 1.0, 0.0, w - 1.0])
    cx, cy = frame.local_xy_of_pixels(corner_rows, corner_cols)
    world_corners = pose.world_from_local(np.stack([cx, cy], axis=-1))
    pix = canvas.world_to_pixel(world_corners)

    col_lo = max(0, int(np.floor(pix[:, 0].min())) - 1)
    col_hi = min(canvas.shape[1], int(np.ceil(pix[:, 0].max())) + 2)
    row_lo = max(0, int(np.floor(pix[:, 1].min())) - 1)
    row_hi = min(canvas.shape[0], int(np.ceil(pix[:, 1].max())) + 2)
    if col_lo >= col_hi or row_lo >= row_hi:
        return PlacedLayer(
            frame_index,
            0,
            0,
            np.zeros((0, 0), dtype=np.float32),
            np.zeros((0, 0), dtype=bool),
            None if scores is None else np.zeros((0, 0), dtype=np.float32),
        )

    wx, wy = canvas.pixel_to_world(
        np.arange(col_lo, col_hi, dtype=float)[None, :],
        np.arange(row_lo, row_hi, dtype=float)[:, None],
    )
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    dx = wx - pose.x
    dy = wy - pose.y
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    frame_rows, frame_cols = frame.pixels_of_local_xy(qx, qy)
    intensity, good, out_scores = _sample_layer(frame, frame_rows, frame_cols, scores)
    return PlacedLayer(
        frame_index,
        row_lo,
        col_lo,
        intensity.astype(np.float32),
        good,
        None if out_scores is None else out_scores.astype(np.float32),
    )


def rotate_frame(frame: CartesianFrame, angle: float) -> CartesianFrame:
    """Rotate frame content by ``angle`` (CCW, radians) about the apex."""
    h, w = frame.shape
    rows = np.arange(h, dtype=float)[:, None]
    cols = np.arange(w, dtype=float)[None, :]
    x, y = frame.local_xy_of_pixels(rows, cols)
    # content rotated by +angle means sampling the source at R(-angle) p
    c, s = np.cos(-angle), np.sin(-angle)
    qx = c * x - s * y
    qy = s * x + c * y
    frame_rows, frame_cols = frame.pixels_of_local_xy(qx, qy)
    intensity, good, _ = _sample_layer(frame, frame_rows, frame_cols)
    return CartesianFrame(intensity, good, frame.pixel_scale, frame.apex, frame.timestamp)


def canvas_matching_frame(frame: CartesianFrame) -> MosaicCanvas:
    """Canvas whose pixel grid coincides with the frame's local grid."""
    origin = (-frame.apex[1] * frame.pixel_scale, -frame.apex[0] * frame.pixel_scale)
    return MosaicCanvas(origin=origin, pixel_scale=frame.pixel_scale, shape=frame.shape)


def paste_layer(layer: PlacedLayer, shape: tuple[int, int]):
    """Expand a cropped layer back onto a full canvas-sized grid."""
    intensity = np.zeros(shape, dtype=float)
    valid = np.zeros(shape, dtype=bool)
    if not layer.empty:
        h, w = layer.shape
        sl = (slice(layer.row0, layer.row0 + h), slice(layer.col0, layer.col0 + w))
        intensity[sl] = layer.intensity
        valid[sl] = layer.valid
    return intensity, valid


def masked_ncc(
    a: np.ndarray, mask_a: np.ndarray, b: np.ndarray, mask_b: np.ndarray, min_overlap: int = 16
) -> float:
    """Zero-mean normalized cross-correlation over the overlap of two masks."""
    overlap = mask_a & mask_b
    n = int(overlap.sum())
    if n < min_overlap:
        return 0.0
    av = a[overlap].astype(float)
    bv = b[overlap].astype(float)
    av -= av.mean()
    bv -= bv.mean()
    denom = np.sqrt((av * av).sum() * (bv * bv).sum())
    if denom <= 0:
        return 0.0
    return float((av * bv).sum() / denom)
