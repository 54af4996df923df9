"""Discretized distance distributions for the six box sides.

A side distance is predicted as a probability vector over ``N`` bins that
split ``[s_min, s_max]``; bin centers serve as the support points, and the
side location is the expectation over them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .box_geometry import SideId
from .errors import InvalidInputError

DEFAULT_TOPK = 4
DEFAULT_BINS = 32


@dataclass(frozen=True)
class SideRange:
    s_min: float
    s_max: float
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        if not self.s_min < self.s_max:
            raise InvalidInputError(f"need s_min < s_max, got [{self.s_min}, {self.s_max}]")
        if int(self.n_bins) != self.n_bins or self.n_bins < 2:
            raise InvalidInputError(f"n_bins must be an integer >= 2, got {self.n_bins}")

    @property
    def bin_width(self) -> float:
        return (self.s_max - self.s_min) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.s_min + (np.arange(self.n_bins) + 0.5) * self.bin_width


def indoor_ranges(n_bins: int = DEFAULT_BINS) -> tuple:
    """Indoor ranges, in SideId order: horizontal sides [0, 3.5] m, top/down [0, 2] m."""
    horizontal = SideRange(0.0, 3.5, n_bins)
    vertical = SideRange(0.0, 2.0, n_bins)
    return tuple(vertical if s in (SideId.TOP, SideId.DOWN) else horizontal for s in SideId)


def outdoor_ranges(n_bins: int = DEFAULT_BINS) -> tuple:
    """Outdoor ranges: front/back [0, 0.4] m, the other four sides [0, 0.3] m."""
    long_axis = SideRange(0.0, 0.4, n_bins)
    other = SideRange(0.0, 0.3, n_bins)
    return tuple(long_axis if s in (SideId.FRONT, SideId.BACK) else other for s in SideId)


RANGE_PRESETS = {"indoor": indoor_ranges, "outdoor": outdoor_ranges}


@dataclass(frozen=True, eq=False)
class SideDistribution:
    range: SideRange
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).reshape(-1)
        if p.shape != (self.range.n_bins,):
            raise InvalidInputError(
                f"expected {self.range.n_bins} probabilities, got {p.shape[0]}")
        if not np.isfinite(p).all() or (p < 0.0).any():
            raise InvalidInputError("probabilities must be finite and non-negative")
        total = p.sum()
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"probabilities must sum to 1, got {total!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


def distribution_from_logits(logits, side_range: SideRange) -> SideDistribution:
    z = np.asarray(logits, dtype=float).reshape(-1)
    if z.shape != (side_range.n_bins,):
        raise InvalidInputError(f"expected {side_range.n_bins} logits, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return SideDistribution(side_range, softmax(z))


def expected_value(dist: SideDistribution) -> float:
    return float(np.dot(dist.probs, dist.range.centers))


def distribution_stats(dist: SideDistribution, k: int = DEFAULT_TOPK):
    """Return ``(topk_mean, topk_variance, full_variance)``.

    The top-k statistics are taken over the k largest probability values.
    ``full_variance`` is the variance of the distance over the bin centers.
    """
    n = dist.range.n_bins
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must be in [1, {n}], got {k}")
    top = np.sort(dist.probs)[::-1][:k]
    centers = dist.range.centers
    mean = float(np.dot(dist.probs, centers))
    full_var = float(np.dot(dist.probs, (centers - mean) ** 2))
    return float(top.mean()), float(top.var()), full_var


def distribution_features(dist: SideDistribution, k: int = DEFAULT_TOPK) -> np.ndarray:
    """Probability vector followed by its top-k mean and variance (length N + 2)."""
    topk_mean, topk_var, _ = distribution_stats(dist, k)
    return np.concatenate([dist.probs, [topk_mean, topk_var]])


def synthetic_distribution(true_value, sharpness, bias, side_range: SideRange,
                           rng=None, noise_std=0.0) -> SideDistribution:
    """Peaked distribution centered on ``true_value + bias``.

    Logits are ``-(s_i - target)**2 * sharpness`` plus optional Gaussian noise
    drawn from ``rng``.
    """
    target = float(true_value) + float(bias)
    if not side_range.s_min <= target <= side_range.s_max:
        raise InvalidInputError(
            f"target {target} outside [{side_range.s_min}, {side_range.s_max}]")
    if sharpness < 0:
        raise InvalidInputError(f"sharpness must be non-negative, got {sharpness}")
    logits = -((side_range.centers - target) ** 2) * float(sharpness)
    if noise_std > 0.0:
        if rng is None:
            raise InvalidInputError("noise_std > 0 requires an rng")
        logits = logits + rng.normal(0.0, noise_std, size=side_range.n_bins)
    return distribution_from_logits(logits, side_range)


def shift_distribution(dist: SideDistribution, delta: float) -> SideDistribution:
    """Move probability mass by ``delta`` meters, splitting it between neighbor bins.

    The expectation moves by exactly ``delta`` unless mass is pushed past the
    range ends, where it piles up on the outermost bin.
    """
    w = dist.range.bin_width
    n = dist.range.n_bins
    pos = np.arange(n) + float(delta) / w
    pos = np.clip(pos, 0.0, n - 1.0)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.minimum(lo + 1, n - 1)
    out = (np.bincount(lo, dist.probs * (1.0 - frac), minlength=n)
           + np.bincount(hi, dist.probs * frac, minlength=n))
    return SideDistribution(dist.range, out / out.sum())
