"""Evaluation suite: image quality, pose consistency, quadrat spacing.

All image metrics are restricted to a validity mask and are insensitive
to values outside it (masked-out pixels are zeroed before any filtering,
and derivative metrics only average over the mask interior).
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from .frames import EMPTY_VALUE, CartesianFrame, ParameterError
from .registration import fmt_register
from .synth import QuadratLayout


@dataclass(frozen=True)
class ImageQuality:
    entropy: float  # Shannon entropy of the 256-bin histogram, normalized by 8 bits
    variance: float
    rms_contrast: float
    tenengrad: float  # mean squared Sobel gradient magnitude
    vol: float  # variance of the 3x3 Laplacian response


def image_metrics(image: np.ndarray, mask: np.ndarray) -> ImageQuality:
    """Quality indicators of a unit-interval image over a validity mask."""
    img = np.asarray(image, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if img.shape != m.shape:
        raise ParameterError("image and mask shapes differ")
    if not m.any():
        raise ParameterError("image metrics need at least one valid pixel")
    vals = img[m]

    hist, _ = np.histogram(vals, bins=256, range=(0.0, 1.0))
    p = hist[hist > 0] / vals.size
    entropy = float(-(p * np.log2(p)).sum() / 8.0)

    variance = float(vals.var())
    rms = float(vals.std())

    work = np.where(m, img, 0.0)
    interior = binary_erosion(m, structure=np.ones((3, 3)))
    if interior.any():
        gx = cv2.Sobel(work, cv2.CV_64F, 1, 0, ksize=3)
        gy = cv2.Sobel(work, cv2.CV_64F, 0, 1, ksize=3)
        tenengrad = float((gx**2 + gy**2)[interior].mean())
        lap = cv2.Laplacian(work, cv2.CV_64F, ksize=1)
        vol = float(lap[interior].var())
    else:
        tenengrad = 0.0
        vol = 0.0
    return ImageQuality(entropy, variance, rms, tenengrad, vol)


def similarity_score(a: CartesianFrame, b: CartesianFrame) -> float:
    """Registration confidence of a frame pair (correlation after alignment)."""
    return fmt_register(a, b).ncc_peak


def _positions(traj) -> np.ndarray:
    if hasattr(traj, "x") and hasattr(traj, "y"):
        return np.stack([np.asarray(traj.x, dtype=float), np.asarray(traj.y, dtype=float)], axis=1)
    arr = np.asarray([[p.x, p.y] if hasattr(p, "x") else p[:2] for p in traj], dtype=float)
    return arr


def pose_consistency(traj_a, traj_b) -> dict:
    """Per-step relative displacement agreement between two trajectories.

    Compares consecutive position deltas; returns their mean and RMS
    disagreement in meters. Uniformly translating either trajectory
    leaves the result unchanged.
    """
    a = _positions(traj_a)
    b = _positions(traj_b)
    if a.shape != b.shape:
        raise ParameterError("trajectories must have matching lengths")
    if a.shape[0] < 2:
        raise ParameterError("pose consistency needs at least two poses")
    da = np.diff(a, axis=0)
    db = np.diff(b, axis=0)
    err = np.linalg.norm(da - db, axis=1)
    return {"mae": float(err.mean()), "rmse": float(np.sqrt((err**2).mean()))}


def trajectory_rmse(estimated, truth) -> float:
    """Root-mean-square position error between matched trajectories."""
    a = _positions(estimated)
    b = _positions(truth)
    if a.shape != b.shape:
        raise ParameterError("trajectories must have matching lengths")
    return float(np.sqrt((np.linalg.norm(a - b, axis=1) ** 2).mean()))


def _match_centers(detected: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1:1 nearest-neighbor assignment after centroid alignment.

    Raises when the assignment is ambiguous (two detections claiming the
    same ground-truth center), listing the offenders.
    """
    d = detected - detected.mean(axis=0)
    t = truth - truth.mean(axis=0)
    assignment = np.array([int(np.argmin(np.linalg.norm(t - di, axis=1))) for di in d])
    counts = np.bincount(assignment, minlength=truth.shape[0])
    if (counts > 1).any() or (counts == 0).any():
        dup = [int(j) for j in np.nonzero(counts > 1)[0]]
        missing = [int(j) for j in np.nonzero(counts == 0)[0]]
        raise ParameterError(
            f"ambiguous center assignment: duplicated truth indices {dup}, unmatched {missing}"
        )
    return assignment


def quadrat_spacing_error(detected_centers: np.ndarray, layout: QuadratLayout) -> dict:
    """Pairwise center-spacing errors of detected quadrats vs the layout.

    All pairwise center-to-center distances are compared under the
    nearest-neighbor correspondence, so the result is invariant to rigid
    motion of the detected set (as long as the assignment stays
    unambiguous).
    """
    detected = np.atleast_2d(np.asarray(detected_centers, dtype=float))
    truth = layout.centers
    if detected.shape != truth.shape:
        raise ParameterError(
            f"detected {detected.shape[0]} centers but the layout has {truth.shape[0]}"
        )
    assignment = _match_centers(detected, truth)
    errors = []
    n = truth.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d_det = np.linalg.norm(detected[i] - detected[j])
            d_true = np.linalg.norm(truth[assignment[i]] - truth[assignment[j]])
            errors.append(abs(d_det - d_true))
    errors = np.asarray(errors)
    return {"mae": float(errors.mean()), "rmse": float(np.sqrt((errors**2).mean()))}


def render_quadrat_template(side: float, line_width: float, pixel_scale: float) -> np.ndarray:
    """Bright square-outline template matching the scene renderer."""
    margin = 2.0 * line_width
    half = 0.5 * side + margin
    n = 2 * int(np.ceil(half / pixel_scale)) + 1
    c = (n - 1) / 2.0
    coords = (np.arange(n) - c) * pixel_scale
    d = np.maximum(np.abs(coords)[None, :], np.abs(coords)[:, None])
    return (np.abs(d - 0.5 * side) <= 0.5 * line_width).astype(np.float32)


@dataclass
class QuadratDetection:
    centers: np.ndarray  # (k, 2) world coordinates
    confidences: np.ndarray  # (k,)
    complete: bool  # False when fewer peaks than layout entries cleared the bar


def locate_quadrats(
    mosaic: np.ndarray,
    origin: tuple[float, float],
    pixel_scale: float,
    layout: QuadratLayout,
    line_width: float = 0.05,
    min_confidence: float = 0.3,
    min_separation: float = 0.8,
) -> QuadratDetection:
    """Find quadrat centers in a mosaic by normalized template matching.

    Each nominal side length is matched separately; the strongest
    non-overlapping correlation peaks are reported as centers with their
    confidence. A partial result (fewer centers than the layout, or weak
    peaks) is flagged rather than raised.
    """
    grid = np.asarray(mosaic, dtype=float)
    covered = grid > EMPTY_VALUE + 0.5
    if not covered.any():
        return QuadratDetection(np.zeros((0, 2)), np.zeros(0), False)
    fill = grid[covered].mean()
    # light smoothing on both sides tolerates the ring blur and residual
    # misalignment ghosting of real mosaics
    work = gaussian_filter(np.where(covered, grid, fill), 1.0).astype(np.float32)

    sep_px = int(round(min_separation / pixel_scale))
    centers = []
    confidences = []
    for side in np.unique(layout.side_lengths):
        wanted = int((layout.side_lengths == side).sum())
        template = render_quadrat_template(float(side), line_width, pixel_scale)
        template = gaussian_filter(template, 1.0).astype(np.float32)
        if template.shape[0] > work.shape[0] or template.shape[1] > work.shape[1]:
            continue
        response = cv2.matchTemplate(work, template, cv2.TM_CCOEFF_NORMED)
        response = np.nan_to_num(response, nan=-1.0)
        off = (template.shape[0] - 1) / 2.0
        for _ in range(wanted):
            k = np.unravel_index(int(np.argmax(response)), response.shape)
            conf = float(response[k])
            if conf <= -1.0:
                break
            row, col = k[0] + off, k[1] + off
            centers.append(
                (origin[0] + col * pixel_scale, origin[1] + row * pixel_scale)
            )
            confidences.append(conf)
            r_lo = max(k[0] - sep_px, 0)
            c_lo = max(k[1] - sep_px, 0)
            response[r_lo : k[0] + sep_px + 1, c_lo : k[1] + sep_px + 1] = -1.0

    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    confidences = np.asarray(confidences, dtype=float)
    strong = confidences >= min_confidence
    complete = int(strong.sum()) >= len(layout)
    return QuadratDetection(centers, confidences, complete)
