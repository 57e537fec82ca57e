"""Globally consistent 2-D seabed mosaics from forward-looking sonar.

The package chains five stages: polar-frame preprocessing, Fourier-based
pairwise registration gated by EKF-fused GPS/compass priors, nonlinear
least-squares trajectory refinement, mask-aware warping, and
variance-driven robust blending. A synthetic survey generator and a
metric suite make every stage verifiable against ground truth.
"""

from .angles import circular_mean, interp_headings, wrap_angle
from .frames import (
    EMPTY_VALUE,
    CartesianFrame,
    MosaicCanvas,
    ParameterError,
    PlacedLayer,
    PolarFrame,
    Pose2D,
    SonarGeometry,
    canvas_for_poses,
    masked_ncc,
    polar_to_cartesian,
    rotate_frame,
    warp_to_canvas,
)

__version__ = "0.1.0"

__all__ = [
    "EMPTY_VALUE",
    "CartesianFrame",
    "MosaicCanvas",
    "ParameterError",
    "PlacedLayer",
    "PolarFrame",
    "Pose2D",
    "SonarGeometry",
    "canvas_for_poses",
    "circular_mean",
    "interp_headings",
    "masked_ncc",
    "polar_to_cartesian",
    "rotate_frame",
    "warp_to_canvas",
    "wrap_angle",
    "__version__",
]
