"""Pairwise frame registration with prior-gated chaining.

Rotation between two frames is recovered by phase correlation of their
log-polar-resampled magnitude spectra with the scale axis locked to 1
(the motion model is rotation + translation at a known pixel scale);
translation follows from phase correlation after de-rotation. Each local
motion is validated against the relative motion implied by the pose
priors, and gated pairs are re-registered across the gap.

Sign conventions: ``delta_theta`` is the heading change of the later
frame relative to the earlier one; ``delta_p`` is the apex displacement
expressed in the earlier frame's oriented coordinates. Both follow the
rigid model ``b(p) = a(R(delta_theta) p + delta_p)`` on local metric
coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fft2, fftshift, ifft2, next_fast_len
from scipy.ndimage import binary_erosion, gaussian_filter, map_coordinates

from .angles import rotation_matrix, wrap_angle
from .ekf import PriorTrajectory
from .frames import (
    CartesianFrame,
    ParameterError,
    Pose2D,
    canvas_matching_frame,
    masked_ncc,
    paste_layer,
    rotate_frame,
    warp_to_canvas,
)

ROTATION_SEARCH_LIMIT = np.deg2rad(30.0)  # consecutive frames cannot rotate more
_N_THETA = 720  # log-polar angular bins over [0, pi)
_N_RADIUS = 128
_DEGENERATE_STD = 1e-9
# the coarse spectral estimate cannot separate rotations from the static
# near-apex component below ~1 deg; such estimates get a local refinement
_REFINE_BAND = np.deg2rad(1.4)
_REFINE_STEP = np.deg2rad(0.55)


class ChainError(RuntimeError):
    """Fewer than two frames survived registration gating."""


@dataclass(frozen=True)
class RelativeMotion:
    delta_p: np.ndarray  # (2,) meters in the earlier frame's oriented coordinates
    delta_theta: float  # radians, wrapped
    ncc_peak: float  # [0, 1] confidence after alignment
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "delta_p", np.asarray(self.delta_p, dtype=float).reshape(2))
        object.__setattr__(self, "delta_theta", wrap_angle(float(self.delta_theta)))
        object.__setattr__(self, "ncc_peak", float(np.clip(self.ncc_peak, 0.0, 1.0)))


@dataclass(frozen=True)
class ValidationGate:
    tau_p: float = 0.5  # meters
    tau_a: float = float(np.deg2rad(10.0))

    def __post_init__(self):
        if self.tau_p <= 0 or self.tau_a <= 0:
            raise ParameterError("gate thresholds must be strictly positive")


@dataclass(frozen=True)
class ValidationResult:
    accept: bool
    delta_p_err: float
    delta_theta_err: float


@dataclass
class Rejection:
    index: int
    delta_p_err: float
    delta_theta_err: float
    reason: str


@dataclass
class RegistrationChain:
    valid_indices: list[int]
    motions: dict[tuple[int, int], RelativeMotion]
    rejections: list[Rejection] = field(default_factory=list)


def _quadratic_peak(c_minus: float, c_0: float, c_plus: float) -> float:
    """Sub-sample offset of a parabola through three samples."""
    denom = c_minus - 2.0 * c_0 + c_plus
    if abs(denom) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (c_minus - c_plus) / denom, -1.0, 1.0))


def _highpass(shape: tuple[int, int]) -> np.ndarray:
    """Emphasis filter removing the low-frequency hump of fan imagery."""
    rows = np.cos(np.pi * (np.arange(shape[0]) / shape[0] - 0.5))
    cols = np.cos(np.pi * (np.arange(shape[1]) / shape[1] - 0.5))
    x = np.outer(rows, cols)
    return (1.0 - x) * (2.0 - x)


def _padded(pixels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=float)
    out[: pixels.shape[0], : pixels.shape[1]] = pixels
    return out


def _conditioned(frame: CartesianFrame) -> np.ndarray:
    """Zero-mean fan content under a softened validity mask.

    Keeps the static fan outline from flooding the magnitude spectrum:
    the mean level is removed inside the fan and the boundary is eroded
    and Gaussian-smoothed so aperture edges carry no sharp spectral
    ridges.
    """
    mask = frame.valid_mask
    if not mask.any():
        return np.zeros_like(frame.pixels)
    z = np.where(mask, frame.pixels - frame.pixels[mask].mean(), 0.0)
    soft = binary_erosion(mask, np.ones((3, 3)), iterations=4).astype(float)
    return z * gaussian_filter(soft, 8.0)


def _log_polar_magnitude(pixels: np.ndarray, pad_shape: tuple[int, int]) -> np.ndarray:
    """Log-polar resampling of the centered log-magnitude spectrum.

    The radial band skips the lowest frequencies (residual envelope) and
    stops well inside Nyquist; a Hann profile fades the radial ends so
    the angular correlation is not dominated by band edges.
    """
    spectrum = np.abs(fftshift(fft2(_padded(pixels, pad_shape))))
    spectrum = np.log1p(spectrum * _highpass(pad_shape))
    cy, cx = pad_shape[0] / 2.0, pad_shape[1] / 2.0
    r_max = 0.35 * min(pad_shape)
    r_min = 10.0
    theta = np.arange(_N_THETA) * (np.pi / _N_THETA)
    radius = np.exp(np.linspace(np.log(r_min), np.log(r_max), _N_RADIUS))
    rows = cy + radius[None, :] * np.sin(theta)[:, None]
    cols = cx + radius[None, :] * np.cos(theta)[:, None]
    lp = map_coordinates(spectrum, [rows, cols], order=1, mode="constant", cval=0.0)
    return lp * np.hanning(_N_RADIUS)[None, :]


def _phase_correlation(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Real correlation surface of the normalized cross-power spectrum."""
    cross = fa * np.conj(fb)
    mag = np.abs(cross)
    cross /= np.maximum(mag, 1e-12 * (mag.max() if mag.size else 1.0) + 1e-300)
    return np.real(ifft2(cross))


def _heading_change_from_logpolar(
    lp_a: np.ndarray, lp_b: np.ndarray, center: float = 0.0
) -> float:
    """Heading change of frame b relative to frame a, radians.

    The correlation surface is evaluated at zero radial (log-scale) shift
    only. The peak index equals the negated angular shift of b's spectrum,
    and the spectrum rotates with the content (which counter-rotates
    against the vehicle heading), so the peak reads out the heading change
    directly.

    Magnitude spectra only determine the rotation modulo pi, and the
    search is limited to ``center`` +- the rotation cap; ``center``
    (e.g. the prior heading delta) picks the branch for large rotations.
    """
    corr = _phase_correlation(fft2(lp_a), fft2(lp_b))
    column = corr[:, 0]
    n = column.size
    shifts = np.arange(n)
    shifts = np.where(shifts > n // 2, shifts - n, shifts)
    angles = shifts * (np.pi / n)
    # circular distance on the mod-pi axis between bin angle and center
    dist = np.abs(np.remainder(angles - center + 0.5 * np.pi, np.pi) - 0.5 * np.pi)
    masked = np.where(dist <= ROTATION_SEARCH_LIMIT, column, -np.inf)
    k = int(np.argmax(masked))
    sub = _quadratic_peak(column[(k - 1) % n], column[k], column[(k + 1) % n])
    phi = float((shifts[k] + sub) * (np.pi / n))
    # nearest representative of phi's mod-pi class to the center
    return phi + np.pi * np.round((center - phi) / np.pi)


def _translation_peak(corr: np.ndarray) -> tuple[float, float]:
    """Sub-pixel (drow, dcol) displacement from a correlation surface."""
    surf = fftshift(corr)
    h, w = surf.shape
    cy, cx = h // 2, w // 2
    k = np.unravel_index(int(np.argmax(surf)), surf.shape)
    dr = _quadratic_peak(surf[(k[0] - 1) % h, k[1]], surf[k], surf[(k[0] + 1) % h, k[1]])
    dc = _quadratic_peak(surf[k[0], (k[1] - 1) % w], surf[k], surf[k[0], (k[1] + 1) % w])
    return float(k[0] - cy + dr), float(k[1] - cx + dc)


def alignment_ncc(a: CartesianFrame, b: CartesianFrame, motion: "RelativeMotion") -> float:
    """Normalized correlation of b warped into a's grid by the motion."""
    canvas = canvas_matching_frame(a)
    layer = warp_to_canvas(b, Pose2D(motion.delta_p[0], motion.delta_p[1], motion.delta_theta), canvas)
    warped, valid = paste_layer(layer, a.shape)
    return max(0.0, masked_ncc(a.pixels, a.valid_mask, warped, valid))


def _half_frame(frame: CartesianFrame) -> CartesianFrame:
    """2x-decimated copy used for cheap alignment-quality probes."""
    return CartesianFrame(
        frame.pixels[::2, ::2],
        frame.valid_mask[::2, ::2],
        2.0 * frame.pixel_scale,
        (frame.apex[0] / 2.0, frame.apex[1] / 2.0),
        frame.timestamp,
    )


class _FrameCache:
    """Per-frame FFT products reused across chain pairs.

    The log-polar stage needs a square FFT grid (isotropic frequency
    sampling, otherwise image rotations warp in the spectrum); the
    translation stage uses the cheaper rectangular grid.
    """

    def __init__(self, frame: CartesianFrame, pad_rect: tuple[int, int], pad_square: int):
        self.frame = frame
        self.pad_rect = pad_rect
        self.pad_square = pad_square
        self.pad_half = (
            next_fast_len((pad_rect[0] + 1) // 2),
            next_fast_len((pad_rect[1] + 1) // 2),
        )
        self._lp = None
        self._fft = None
        self._half = None
        self._half_fft = None

    @property
    def logpolar(self) -> np.ndarray:
        if self._lp is None:
            self._lp = _log_polar_magnitude(
                _conditioned(self.frame), (self.pad_square, self.pad_square)
            )
        return self._lp

    @property
    def fft(self) -> np.ndarray:
        if self._fft is None:
            self._fft = fft2(_padded(self.frame.pixels, self.pad_rect))
        return self._fft

    @property
    def half(self) -> CartesianFrame:
        if self._half is None:
            self._half = _half_frame(self.frame)
        return self._half

    @property
    def half_fft(self) -> np.ndarray:
        if self._half_fft is None:
            self._half_fft = fft2(_padded(self.half.pixels, self.pad_half))
        return self._half_fft


def _pad_shapes_for(frames: list[CartesianFrame]) -> tuple[tuple[int, int], int]:
    h = max(f.shape[0] for f in frames)
    w = max(f.shape[1] for f in frames)
    return (next_fast_len(h), next_fast_len(w)), next_fast_len(max(h, w))


def _rotate_pixels_fast(frame: CartesianFrame, angle: float) -> np.ndarray:
    """Plain bilinear rotation about the apex (no mask bookkeeping)."""
    h, w = frame.shape
    rows = np.arange(h, dtype=float)[:, None]
    cols = np.arange(w, dtype=float)[None, :]
    x, y = frame.local_xy_of_pixels(rows, cols)
    c, s = np.cos(-angle), np.sin(-angle)
    fr, fc = frame.pixels_of_local_xy(c * x - s * y, s * x + c * y)
    return map_coordinates(frame.pixels, [fr, fc], order=1, mode="constant", cval=0.0)


def _alignment_quality(ca: _FrameCache, cb: _FrameCache, angle: float) -> float:
    """Half-resolution translation correlation peak after de-rotation."""
    rotated = _rotate_pixels_fast(cb.half, angle)
    corr = _phase_correlation(ca.half_fft, fft2(_padded(rotated, ca.pad_half)))
    return float(corr.max())


def _refine_heading_change(ca: _FrameCache, cb: _FrameCache, phi0: float) -> float:
    """Sharpen a small spectral rotation estimate against alignment quality.

    Near the search center the log-polar peak merges with the static
    zero-shift component, so the estimate is re-centered by a quadratic
    fit of the de-rotated translation correlation peak over candidate
    angles. The probe step shrinks once the maximum is bracketed.
    """
    phi = phi0
    lo, hi = phi0 - 2.0 * _REFINE_BAND, phi0 + 2.0 * _REFINE_BAND
    step = _REFINE_STEP
    for _ in range(4):
        q = [_alignment_quality(ca, cb, phi + d) for d in (-step, 0.0, step)]
        offset = _quadratic_peak(q[0], q[1], q[2])
        phi = float(np.clip(phi + offset * step, lo, hi))
        if q[1] >= q[0] and q[1] >= q[2]:
            step /= 3.5
            if step < np.deg2rad(0.1):
                break
    return phi


def _register_cached(
    ca: _FrameCache, cb: _FrameCache, rotation_center: float = 0.0
) -> RelativeMotion:
    a, b = ca.frame, cb.frame
    s = a.pixel_scale
    if a.valid_mask.any():
        std_a = a.pixels[a.valid_mask].std()
    else:
        std_a = 0.0
    std_b = b.pixels[b.valid_mask].std() if b.valid_mask.any() else 0.0
    if std_a < _DEGENERATE_STD or std_b < _DEGENERATE_STD:
        return RelativeMotion(np.zeros(2), 0.0, 0.0, degenerate=True)

    delta_theta = _heading_change_from_logpolar(ca.logpolar, cb.logpolar, rotation_center)
    # static spectral structure (shared sampling pattern) interferes only
    # with near-zero rotation estimates
    if abs(delta_theta) <= _REFINE_BAND:
        delta_theta = _refine_heading_change(ca, cb, delta_theta)

    derotated = _rotate_pixels_fast(b, delta_theta)
    corr = _phase_correlation(ca.fft, fft2(_padded(derotated, ca.pad_rect)))
    drow, dcol = _translation_peak(corr)
    # de-rotated b equals a translated by delta_p; the correlation peak of
    # (a, b') sits at +delta_p in pixels, up to the apex offset between
    # the two pixel grids (zero for same-geometry fan frames)
    delta_p = np.array(
        [dcol + b.apex[1] - a.apex[1], drow + b.apex[0] - a.apex[0]]
    ) * s
    motion = RelativeMotion(delta_p, delta_theta, 0.0)
    ncc = alignment_ncc(ca.half, cb.half, motion)
    return RelativeMotion(delta_p, delta_theta, ncc)


def fmt_register(
    a: CartesianFrame, b: CartesianFrame, pixel_scale: float | None = None
) -> RelativeMotion:
    """Estimate the rigid motion of frame b relative to frame a.

    Frames must share dimensions and pixel scale and should be
    preprocessed (the fan-edge taper doubles as the spectral window).
    Constant frames yield a zero motion flagged degenerate.
    """
    if a.shape != b.shape:
        raise ParameterError("frames must share dimensions")
    if abs(a.pixel_scale - b.pixel_scale) > 1e-12:
        raise ParameterError("frames must share pixel scale")
    if pixel_scale is not None and abs(pixel_scale - a.pixel_scale) > 1e-12:
        raise ParameterError("pixel_scale disagrees with the frames")
    pad_rect, pad_sq = _pad_shapes_for([a, b])
    return _register_cached(_FrameCache(a, pad_rect, pad_sq), _FrameCache(b, pad_rect, pad_sq))


def validate_pair(
    local: RelativeMotion, prior_delta: tuple[np.ndarray, float], gate: ValidationGate
) -> ValidationResult:
    """Gate a local motion against the prior relative motion.

    Both motions must be expressed in the same (earlier-frame) coordinates;
    the position residual is the Euclidean norm, the angular residual is
    wrapped before taking its magnitude.
    """
    prior_dp, prior_dtheta = prior_delta
    dp_err = float(np.linalg.norm(local.delta_p - np.asarray(prior_dp, dtype=float)))
    dtheta_err = abs(wrap_angle(local.delta_theta - prior_dtheta))
    accept = dp_err <= gate.tau_p and dtheta_err <= gate.tau_a
    return ValidationResult(accept, dp_err, dtheta_err)


def prior_delta_local(priors: PriorTrajectory, i: int, j: int) -> tuple[np.ndarray, float]:
    """Prior relative motion of frame j w.r.t. frame i, in i's oriented frame."""
    dp_world, dtheta = priors.delta(i, j)
    dp_local = rotation_matrix(priors.theta[i]).T @ dp_world
    return dp_local, dtheta


def chain_register(
    frames: list[CartesianFrame],
    priors: PriorTrajectory,
    gate: ValidationGate = ValidationGate(),
    pixel_scale: float | None = None,
    motion_cache: dict | None = None,
) -> RegistrationChain:
    """Register consecutive frames, discarding pairs that contradict priors.

    After a rejection the discarded frame is skipped and the next frame is
    registered against the last valid one, with the prior delta recomputed
    across the gap. Raises :class:`ChainError` if fewer than two frames
    survive.

    ``motion_cache`` maps (i, j) index pairs to previously computed
    motions (registration is pure, so results are reusable); new results
    are written back into it.
    """
    n = len(frames)
    if n < 2:
        raise ChainError("chain registration needs at least two frames")
    if len(priors) != n:
        raise ParameterError("priors must be aligned one-to-one with frames")

    pad_rect, pad_sq = _pad_shapes_for(frames)
    caches: dict[int, _FrameCache] = {}

    def cache(i: int) -> _FrameCache:
        if i not in caches:
            caches[i] = _FrameCache(frames[i], pad_rect, pad_sq)
        return caches[i]

    def register(i: int, j: int, center: float) -> RelativeMotion:
        if motion_cache is not None and (i, j) in motion_cache:
            return motion_cache[(i, j)]
        motion = _register_cached(cache(i), cache(j), rotation_center=center)
        if motion_cache is not None:
            motion_cache[(i, j)] = motion
        return motion

    valid = [0]
    motions: dict[tuple[int, int], RelativeMotion] = {}
    rejections: list[Rejection] = []
    last = 0
    for j in range(1, n):
        prior_delta = prior_delta_local(priors, last, j)
        motion = register(last, j, prior_delta[1])
        result = validate_pair(motion, prior_delta, gate)
        if result.accept:
            motions[(last, j)] = motion
            valid.append(j)
            caches.pop(last, None)
            last = j
        else:
            reason = "degenerate" if motion.degenerate else "gate"
            rejections.append(Rejection(j, result.delta_p_err, result.delta_theta_err, reason))
            caches.pop(j, None)
    if len(valid) < 2:
        raise ChainError(f"only {len(valid)} frame(s) survived gating")
    if rejections:
        warnings.warn(f"registration discarded {len(rejections)} frame(s)")
    return RegistrationChain(valid, motions, rejections)
