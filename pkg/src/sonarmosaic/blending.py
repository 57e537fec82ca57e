"""Variance-driven robust fusion of overlapping warped frames.

Per frame, a windowed local-variance map feeds short- and long-term
exponential moving averages; their per-frame normalized combination
``s = v_short_norm * exp(-v_long_norm)`` forms the feature score map
(computed in frame coordinates and warped with the frame). Per canvas
pixel, candidate intensities are filtered by a relative score threshold
and a top-N cap, outlier-trimmed around the median, and fused by a
score-weighted mean.

All reductions run in a fixed order; identical inputs give bit-identical
mosaics regardless of block partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .frames import EMPTY_VALUE, CartesianFrame, MosaicCanvas, ParameterError, PlacedLayer

_BLOCK_BUDGET = 24_000_000  # floats per stacked block array


@dataclass(frozen=True)
class BlendParams:
    beta_short: float = 0.60  # short-term EMA decay
    beta_long: float = 0.97  # long-term EMA decay
    rho: float = 0.68  # relative score threshold
    top_n: int = 16  # max candidates per pixel
    eta: float = 2.7  # MAD trim factor
    gamma: float = 1.4  # score weighting exponent
    variance_window: int = 5  # odd pixel count

    def __post_init__(self):
        for b in (self.beta_short, self.beta_long):
            if not (0.0 < b < 1.0):
                raise ParameterError("EMA decay factors must lie in (0, 1)")
        if self.beta_short >= self.beta_long:
            raise ParameterError("short-term decay must react faster (beta_short < beta_long)")
        if not (0.0 < self.rho <= 1.0):
            raise ParameterError("rho must lie in (0, 1]")
        if self.top_n < 1:
            raise ParameterError("top_n must be >= 1")
        if self.eta <= 0 or self.gamma <= 0:
            raise ParameterError("eta and gamma must be positive")
        if self.variance_window < 3 or self.variance_window % 2 == 0:
            raise ParameterError("variance window must be odd and >= 3")


@dataclass(frozen=True)
class VarianceMaps:
    v_short: np.ndarray
    v_long: np.ndarray

    def __post_init__(self):
        vs = np.asarray(self.v_short, dtype=float)
        vl = np.asarray(self.v_long, dtype=float)
        if vs.shape != vl.shape:
            raise ParameterError("variance maps must share dimensions")
        if (vs < 0).any() or (vl < 0).any():
            raise ParameterError("variance maps must be non-negative")
        object.__setattr__(self, "v_short", vs)
        object.__setattr__(self, "v_long", vl)


def local_variance(frame: CartesianFrame, window: int) -> np.ndarray:
    """Windowed intensity variance using valid pixels only.

    Pixels whose window holds fewer than two valid samples get 0.
    """
    if window < 3 or window % 2 == 0:
        raise ParameterError("variance window must be odd and >= 3")
    mask = frame.valid_mask.astype(float)
    scale = float(window * window)
    count = uniform_filter(mask, size=window, mode="constant") * scale
    s1 = uniform_filter(frame.pixels * mask, size=window, mode="constant") * scale
    s2 = uniform_filter(frame.pixels**2 * mask, size=window, mode="constant") * scale
    enough = count >= 2.0 - 1e-9
    safe = np.where(enough, np.maximum(count, 1.0), 1.0)
    mean = s1 / safe
    var = s2 / safe - mean**2
    return np.where(enough, np.maximum(var, 0.0), 0.0)


def update_ema(prev: VarianceMaps | None, instantaneous: np.ndarray, params: BlendParams) -> VarianceMaps:
    """One EMA step; the first frame initializes both maps to its variance."""
    inst = np.asarray(instantaneous, dtype=float)
    if prev is None:
        return VarianceMaps(inst.copy(), inst.copy())
    if prev.v_short.shape != inst.shape:
        raise ParameterError("EMA map dimensions differ from the variance map")
    bs, bl = params.beta_short, params.beta_long
    return VarianceMaps(bs * prev.v_short + (1.0 - bs) * inst, bl * prev.v_long + (1.0 - bl) * inst)


def _normalize_over(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros_like(values)
    lo = values[mask].min()
    hi = values[mask].max()
    if hi - lo <= 0:
        return np.zeros_like(values)  # degenerate normalization convention
    return (values - lo) / (hi - lo)


def feature_score(maps: VarianceMaps, fan_mask: np.ndarray) -> np.ndarray:
    """Score map s = v_short_norm * exp(-v_long_norm), zero outside the fan.

    Both variance maps are min-max normalized over fan pixels only.
    """
    vs = _normalize_over(maps.v_short, fan_mask)
    vl = _normalize_over(maps.v_long, fan_mask)
    s = vs * np.exp(-vl)
    return np.where(fan_mask, s, 0.0)


def compute_feature_scores(frames: list[CartesianFrame], params: BlendParams) -> list[np.ndarray]:
    """FSMs for a temporally ordered frame sequence (EMA is order-dependent)."""
    maps: VarianceMaps | None = None
    out = []
    for frame in frames:
        inst = local_variance(frame, params.variance_window)
        maps = update_ema(maps, inst, params)
        out.append(feature_score(maps, frame.valid_mask))
    return out


def select_candidates(candidates, params: BlendParams):
    """Filter one pixel's (intensity, score) candidates for blending.

    Keeps scores within ``rho`` of the maximum, caps at the ``top_n``
    highest (ties broken by input order), then trims intensities beyond
    ``eta`` median absolute deviations; the median-closest candidate
    always survives. Empty input violates the contract.
    """
    cand = list(candidates)
    if not cand:
        raise ParameterError("select_candidates requires at least one candidate")
    intensities = np.array([c[0] for c in cand], dtype=float)
    scores = np.array([c[1] for c in cand], dtype=float)

    keep = scores >= params.rho * scores.max()
    idx = np.nonzero(keep)[0]
    order = idx[np.argsort(-scores[idx], kind="stable")]
    order = order[: params.top_n]

    vals = intensities[order]
    med = np.median(vals)
    dev = np.abs(vals - med)
    mad = np.median(dev)
    if mad > 0:
        surviving = dev <= params.eta * mad
        if not surviving.any():
            surviving[int(np.argmin(dev))] = True
        order = order[surviving]
    return [(float(intensities[i]), float(scores[i])) for i in order]


def blend_pixel(trimmed, gamma: float) -> float:
    """Score-weighted mean of trimmed candidates (w = s**gamma).

    Falls back to the unweighted mean when every weight is zero.
    """
    cand = list(trimmed)
    if not cand:
        raise ParameterError("blend_pixel requires at least one candidate")
    intensities = np.array([c[0] for c in cand], dtype=float)
    weights = np.array([c[1] for c in cand], dtype=float) ** gamma
    total = weights.sum()
    if total <= 0:
        return float(intensities.mean())
    return float((weights * intensities).sum() / total)


def _block_rows(n_layers: int, width: int, height: int) -> int:
    per_row = max(n_layers * width, 1)
    rows = max(int(_BLOCK_BUDGET // per_row), 8)
    return min(rows, height)


def _stack_block(layers, row_lo, row_hi, width):
    """Stacked (K, bh, W) intensity/score/valid arrays for one row block."""
    picked = [
        layer
        for layer in layers
        if not layer.empty and layer.row0 < row_hi and layer.row0 + layer.shape[0] > row_lo
    ]
    picked.sort(key=lambda l: l.frame_index)  # ties break toward lower frame index
    k = len(picked)
    bh = row_hi - row_lo
    intensity = np.zeros((k, bh, width), dtype=np.float32)
    score = np.zeros((k, bh, width), dtype=np.float32)
    valid = np.zeros((k, bh, width), dtype=bool)
    for out_i, layer in enumerate(picked):
        h, w = layer.shape
        src_lo = max(row_lo - layer.row0, 0)
        src_hi = min(row_hi - layer.row0, h)
        dst_lo = layer.row0 + src_lo - row_lo
        dst_hi = dst_lo + (src_hi - src_lo)
        cols = slice(layer.col0, layer.col0 + w)
        intensity[out_i, dst_lo:dst_hi, cols] = layer.intensity[src_lo:src_hi]
        valid[out_i, dst_lo:dst_hi, cols] = layer.valid[src_lo:src_hi]
        if layer.score is not None:
            score[out_i, dst_lo:dst_hi, cols] = layer.score[src_lo:src_hi]
        else:
            score[out_i, dst_lo:dst_hi, cols] = layer.valid[src_lo:src_hi].astype(float)
    return intensity, score, valid


def _masked_median(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Median over the masked entries along axis 0 (0 where none are set).

    Invalid entries are pushed to +inf so a plain sort brings the valid
    ones to the front; substantially faster than nanmedian.
    """
    count = mask.sum(axis=0)
    work = np.where(mask, values, np.inf)
    work.sort(axis=0, kind="stable")
    n = np.maximum(count, 1)
    lo = np.take_along_axis(work, ((n - 1) // 2)[None], axis=0)[0]
    hi = np.take_along_axis(work, (n // 2)[None], axis=0)[0]
    return np.where(count > 0, 0.5 * (lo + hi), 0.0)


def _blend_block(intensity, score, valid, params: BlendParams):
    """Vectorized per-pixel candidate selection and robust fusion."""
    k = intensity.shape[0]
    covered = valid.any(axis=0)

    score_masked = np.where(valid, score, -np.float32(np.inf))
    s_max = score_masked.max(axis=0)
    keep = valid & (score_masked >= params.rho * s_max)

    if k > params.top_n:
        # per-pixel rank by descending score; stable sort keeps lower frame first
        order = np.argsort(np.where(keep, -score, np.float32(np.inf)), axis=0, kind="stable")
        ranks = np.empty(order.shape, dtype=np.int32)
        layer_ids = np.arange(k, dtype=np.int32)[:, None, None]
        np.put_along_axis(ranks, order, np.broadcast_to(layer_ids, order.shape), axis=0)
        keep &= ranks < params.top_n

    intensity = intensity.astype(float)
    score = score.astype(float)
    med = _masked_median(intensity, keep)
    dev = np.where(keep, np.abs(intensity - med), np.inf)
    mad = _masked_median(dev, keep)
    trim = keep & (dev <= params.eta * mad)
    trim |= keep & (mad[None] == 0.0)  # zero spread: no trimming
    emptied = covered & ~trim.any(axis=0)
    if emptied.any():
        closest = np.argmin(np.where(keep & emptied, dev, np.inf), axis=0)
        rows, cols = np.nonzero(emptied)
        trim[closest[rows, cols], rows, cols] = True

    weights = np.where(trim, score, 0.0) ** params.gamma
    weights = np.where(trim, weights, 0.0)
    w_sum = weights.sum(axis=0)
    blended = np.where(w_sum > 0, (weights * intensity).sum(axis=0) / np.where(w_sum > 0, w_sum, 1.0), 0.0)
    # all-zero weights fall back to the unweighted mean of kept candidates
    counts = trim.sum(axis=0)
    fallback = counts > 0
    means = np.where(fallback, (np.where(trim, intensity, 0.0)).sum(axis=0) / np.maximum(counts, 1), 0.0)
    blended = np.where(w_sum > 0, blended, means)
    return np.where(covered, blended, EMPTY_VALUE)


def blend_canvas(canvas: MosaicCanvas, params: BlendParams) -> np.ndarray:
    """Fuse all placed layers into ``canvas.blended``.

    Layers without score maps count as uniformly scored over their valid
    region. Uncovered pixels keep the empty sentinel.
    """
    height, width = canvas.shape
    out = np.full((height, width), EMPTY_VALUE, dtype=float)
    layers = [l for l in canvas.layers if not l.empty]
    if layers:
        rows_per_block = _block_rows(len(layers), width, height)
        for row_lo in range(0, height, rows_per_block):
            row_hi = min(row_lo + rows_per_block, height)
            intensity, score, valid = _stack_block(layers, row_lo, row_hi, width)
            if intensity.shape[0] == 0:
                continue
            out[row_lo:row_hi] = _blend_block(intensity, score, valid, params)
    canvas.blended = out
    return out


def average_blend(canvas: MosaicCanvas) -> np.ndarray:
    """Plain per-pixel mean over contributing layers (comparison baseline)."""
    height, width = canvas.shape
    total = np.zeros((height, width))
    count = np.zeros((height, width))
    for layer in canvas.layers:
        if layer.empty:
            continue
        h, w = layer.shape
        sl = (slice(layer.row0, layer.row0 + h), slice(layer.col0, layer.col0 + w))
        total[sl] += np.where(layer.valid, layer.intensity, 0.0)
        count[sl] += layer.valid
    covered = count > 0
    return np.where(covered, total / np.maximum(count, 1), EMPTY_VALUE)
