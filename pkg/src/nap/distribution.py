"""Piecewise-constant ("bar plot") predictive densities over uniform buckets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class BucketSpec:
    lower: float
    upper: float
    count: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"bucket support must satisfy lower < upper, got ({self.lower}, {self.upper})")
        if self.count < 1:
            raise ValueError(f"bucket count must be positive, got {self.count}")

    @property
    def boundaries(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.count + 1)

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.count

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def centers(self) -> np.ndarray:
        b = self.boundaries
        return 0.5 * (b[:-1] + b[1:])

    def bucket_index(self, y) -> np.ndarray:
        """Right-open buckets, with the last one closed at ``upper``."""
        y = np.asarray(y, dtype=np.float64)
        if np.any((y < self.lower) | (y > self.upper)) or not np.isfinite(y).all():
            bad = y[(y < self.lower) | (y > self.upper) | ~np.isfinite(y)]
            raise ValueError(f"value(s) {bad[:5]} outside bucket support [{self.lower}, {self.upper}]")
        idx = np.searchsorted(self.boundaries, y, side="right") - 1
        return np.minimum(idx, self.count - 1)


def make_buckets(y_values, count: int, margin_fraction: float = 0.1) -> BucketSpec:
    y = np.asarray(y_values, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("make_buckets needs at least one value")
    if not np.isfinite(y).all():
        raise ValueError("make_buckets needs finite values")
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be non-negative")
    lo, hi = float(y.min()), float(y.max())
    if hi == lo:
        return BucketSpec(lo - 0.5, hi + 0.5, count)
    pad = margin_fraction * (hi - lo)
    return BucketSpec(lo - pad, hi + pad, count)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def log_prob(logits, y, spec: BucketSpec):
    """Log density of ``y`` under per-row bucket logits (last axis = buckets)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != spec.count:
        raise ValueError(f"expected {spec.count} logits, got {logits.shape[-1]}")
    b = spec.bucket_index(y)
    lp = np.take_along_axis(_log_softmax(logits), np.asarray(b)[..., None], axis=-1)[..., 0]
    out = lp - np.log(spec.width)
    return float(out) if out.ndim == 0 else out


def log_prob_tensor(logits: dc.Tensor, y: np.ndarray, spec: BucketSpec) -> dc.Tensor:
    """Differentiable :func:`log_prob` for a ``(..., count)`` logit tensor."""
    b = spec.bucket_index(y)
    picked = dc.gather(logits, np.asarray(b)[..., None], axis=-1)[..., 0]
    return picked - dc.logsumexp(logits, axis=-1) - np.log(spec.width)


def density(logits, spec: BucketSpec) -> np.ndarray:
    """Per-bucket density values (weight / width)."""
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64))) / spec.width


def expected_improvement(logits, spec: BucketSpec, best: float):
    """Exact E[max(0, y - best)] under the piecewise-constant density.

    Works row-wise on ``(..., count)`` logits.
    """
    if not np.isfinite(best):
        raise ValueError("best must be finite")
    logits = np.asarray(logits, dtype=np.float64)
    w = np.exp(_log_softmax(logits))
    lo = spec.boundaries[:-1]
    hi = spec.boundaries[1:]
    width = spec.widths
    full = lo >= best
    straddle = (lo < best) & (hi > best)
    per_bucket = np.where(full, 0.5 * (lo + hi) - best, 0.0)
    per_bucket = per_bucket + np.where(straddle, (hi - best) ** 2 / (2.0 * width), 0.0)
    out = np.maximum((w * per_bucket).sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out
