"""Histogram estimate of the conditional entropy of an erased patch given its surround.

The patch distribution ``P_B`` is the normalized value histogram of the
erased pixels.  The surround predicts values through a Laplace-smoothed
histogram ``P(v|A) = (count_A(v) + alpha) / (N_r + alpha * bins)``.  The score
is the cross-entropy ``-sum_v P_B(v) log2 P(v|A)`` averaged over channels.
Values are binned as ``floor(value * bins / 256)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .erasing import EraseMask, EraseStrategy, build_mask, parse_strategy


@dataclass(frozen=True)
class EntropyConfig:
    bins: int = 32
    alpha: float = 1.0

    def __post_init__(self):
        if not 2 <= self.bins <= 256:
            raise ValueError(f"bins must lie in [2, 256], got {self.bins}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def quantize(values: np.ndarray, bins: int) -> np.ndarray:
    return (values.astype(np.int64) * bins) // 256


def _histograms(q: np.ndarray, erased: np.ndarray, bins: int):
    """Per-channel patch and surround counts for one quantized (C, H, W) image."""
    c = q.shape[0]
    offs = np.arange(c)[:, None] * bins
    patch = np.bincount((q[:, erased] + offs).ravel(), minlength=c * bins).reshape(c, bins)
    sur = np.bincount((q[:, ~erased] + offs).ravel(), minlength=c * bins).reshape(c, bins)
    return patch, sur


def conditional_entropy(x: np.ndarray, mask: EraseMask | np.ndarray, cfg: EntropyConfig = EntropyConfig()) -> float:
    """Bits; ``x`` is one (C, H, W) uint8 image."""
    m = np.asarray(getattr(mask, "m", mask))
    if x.ndim != 3 or x.shape[1:] != m.shape:
        raise ValueError(f"image {x.shape} does not match mask {m.shape}")
    erased = m == 0
    n_f = int(erased.sum())
    n_r = erased.size - n_f
    if n_f == 0:
        raise ValueError("mask erases no pixels")
    if n_r == 0:
        raise ValueError("mask keeps no surround pixels")
    patch, sur = _histograms(quantize(x, cfg.bins), erased, cfg.bins)
    p_b = patch / n_f
    log_q = np.log2(sur + cfg.alpha) - np.log2(n_r + cfg.alpha * cfg.bins)
    h = -(p_b * log_q).sum(axis=1)
    return float(h.mean())


def entropy_upper_bound(n_r: int, cfg: EntropyConfig = EntropyConfig()) -> float:
    """Largest possible score: every patch value absent from the surround."""
    return float(np.log2((n_r + cfg.alpha * cfg.bins) / cfg.alpha))


def _strategies(strategy) -> list[EraseStrategy]:
    if isinstance(strategy, str):
        return parse_strategy(strategy)
    if isinstance(strategy, EraseStrategy):
        return [strategy]
    return list(strategy)


def entropy_scores(images: np.ndarray, strategy="center", cfg: EntropyConfig = EntropyConfig()) -> np.ndarray:
    """Per-image scores for an (N, C, H, W) uint8 stack, averaged over strategy variants."""
    images = getattr(images, "images", images)
    strategies = _strategies(strategy)
    h, w = images.shape[2:]
    out = np.zeros(len(images))
    for s in strategies:
        m = build_mask(s, h, w)
        out += np.array([conditional_entropy(img, m, cfg) for img in images])
    return out / len(strategies)
