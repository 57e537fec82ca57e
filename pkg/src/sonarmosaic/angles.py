"""Angle arithmetic on the (-pi, pi] principal branch.

Every heading stored anywhere in this package is wrapped with
:func:`wrap_angle`. The reduction uses ``fmod`` plus Sterbenz-exact
corrections, so it is exactly periodic: whenever ``theta + 2*pi*k`` is
representable in floating point, wrapping it gives the bit-identical
result of wrapping ``theta``.
"""

from __future__ import annotations

import numpy as np

TAU = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap angle(s) in radians to (-pi, pi].

    Accepts scalars or arrays; returns the same kind.
    """
    r = np.fmod(theta, TAU)  # exact, result in (-tau, tau), sign of theta
    # both corrections are exact: |r| in [tau/2, tau) puts r and tau
    # within a factor of two of each other (Sterbenz)
    r = np.where(r > 0.5 * TAU, r - TAU, r)
    r = np.where(r <= -0.5 * TAU, r + TAU, r)
    if np.ndim(theta) == 0:
        return float(r)
    return r


def angle_diff(a, b):
    """Shortest signed difference a - b, wrapped to (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def unwrap_headings(headings: np.ndarray) -> np.ndarray:
    """Remove 2*pi jumps from a heading sequence (shortest-arc continuation)."""
    return np.unwrap(np.asarray(headings, dtype=float))


def interp_headings(t_query, t_samples, headings) -> np.ndarray:
    """Linearly interpolate headings along the shortest arc, rewrapped."""
    unwrapped = unwrap_headings(headings)
    return wrap_angle(np.interp(t_query, t_samples, unwrapped))


def circular_mean(headings) -> float:
    """Mean direction of a set of headings."""
    h = np.asarray(headings, dtype=float)
    return float(np.arctan2(np.sin(h).mean(), np.cos(h).mean()))


def rotation_matrix(theta: float) -> np.ndarray:
    """2x2 counterclockwise rotation matrix."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])
