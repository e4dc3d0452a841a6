"""Canny edge channel and 3-channel sample assembly.

The detector is the classic five-stage pipeline: Gaussian blur with kernel
radius ceil(3*sigma), 3x3 Sobel gradients, magnitude with direction quantized
to four bins, non-maximum suppression, and double-threshold hysteresis with
8-connected linking.  Output is a binary 0/1 float grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .depth_core import DepthPair, DepthSample, Norm, sample_from_pair
from .errors import BadThresholds, NonFiniteValue


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.0
    low: float = 0.1
    high: float = 0.2


class EdgeCombine(Enum):
    MAX_OF_SIDES = "max"


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    if radius == 0:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_sep(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable convolution with reflect padding."""
    r = (kernel.shape[0] - 1) // 2
    if r == 0:
        return img.copy()
    padded = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img)
    for k, wgt in enumerate(kernel):
        out += wgt * padded[:, k:k + img.shape[1]]
    padded = np.pad(out, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for k, wgt in enumerate(kernel):
        out += wgt * padded[k:k + img.shape[0], :]
    return out


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _convolve3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="reflect")
    out = np.zeros_like(img)
    h, w = img.shape
    for dj in range(3):
        for di in range(3):
            wgt = kernel[dj, di]
            if wgt != 0.0:
                out += wgt * padded[dj:dj + h, di:di + w]
    return out


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the gradient direction, 4 quantized bins.

    Ties on one side survive (strict test forward, non-strict backward) so a
    plateau of equal magnitudes thins to one pixel instead of vanishing.
    """
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)          # 0deg: horizontal axis
    bins[(angle >= 22.5) & (angle < 67.5)] = 1         # 45deg
    bins[(angle >= 67.5) & (angle < 112.5)] = 2        # 90deg
    bins[(angle >= 112.5) & (angle < 157.5)] = 3       # 135deg

    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dj, di):
        return padded[1 + dj:1 + dj + h, 1 + di:1 + di + w]

    # forward/backward neighbours per bin (dj, di)
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dj, di) in steps.items():
        sel = bins == b
        fwd = shifted(dj, di)
        bwd = shifted(-dj, -di)
        keep |= sel & (mag > fwd) & (mag >= bwd)
    return np.where(keep & (mag > 0), mag, 0.0)


def canny(image: np.ndarray, params: CannyParams = CannyParams()) -> np.ndarray:
    """Binary edge map (floats 0/1) of a single-channel grid."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise NonFiniteValue("edge detection input contains NaN or Inf")
    if not (0.0 < params.low < params.high):
        raise BadThresholds(f"need 0 < low < high, got low={params.low}, high={params.high}")
    if params.sigma < 0:
        raise BadThresholds(f"sigma must be >= 0, got {params.sigma}")

    smoothed = _convolve_sep(img, _gaussian_kernel(params.sigma))
    gx = _convolve3(smoothed, _SOBEL_X)
    gy = _convolve3(smoothed, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    thinned = _nms(mag, gx, gy)

    strong = thinned >= params.high
    weak = thinned >= params.low
    if not strong.any():
        return np.zeros(img.shape)
    # keep weak pixels only when 8-connected to a strong one
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_labels = np.unique(labels[strong])
    edges = np.isin(labels, keep_labels) & weak
    return edges.astype(np.float64)


def make_sample(pair: DepthPair, params: CannyParams = CannyParams(),
                combine: EdgeCombine = EdgeCombine.MAX_OF_SIDES) -> DepthSample:
    """Three-channel sample: unit-range top, unit-range bottom, edge union.

    Edges are detected per side on the unit-normalized depths and merged with
    an elementwise max, so silhouettes of both sides survive in one channel.
    """
    if combine is not EdgeCombine.MAX_OF_SIDES:
        raise ValueError(f"unsupported combine rule {combine!r}")
    gap = pair.spec.gap
    top_u = pair.top.data / gap
    bottom_u = pair.bottom.data / gap
    edge = np.maximum(canny(top_u, params), canny(bottom_u, params))
    unit = sample_from_pair(pair, edge=edge, norm=Norm.RAW).to_norm(Norm.UNIT_RANGE)
    return unit
