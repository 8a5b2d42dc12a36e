"""Image-erasing strategies: which rectangle is removed from each image.

A mask holds 1 on kept (surround) pixels and 0 on erased pixels.  Splitting
an image gives the surround ``x_r = x * m`` and the patch ``x_f = x - x_r``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Kind(str, Enum):
    CENTER = "center"
    CORNER = "corner"
    SIDE = "side"


N_VARIANTS = {Kind.CENTER: 1, Kind.CORNER: 4, Kind.SIDE: 4}
CORNER_NAMES = ("top-left", "top-right", "bottom-left", "bottom-right")
SIDE_NAMES = ("top", "right", "bottom", "left")


def default_patch(h: int, w: int) -> tuple[int, int]:
    """Half-side patch: 16x16 for 32x32 images."""
    return int(round(h / 2)), int(round(w / 2))


@dataclass(frozen=True)
class EraseStrategy:
    kind: Kind
    variant: int = 0
    patch: tuple[int, int] | None = None  # None: half the image side

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0 <= self.variant < N_VARIANTS[self.kind]:
            raise ValueError(f"variant {self.variant} out of range for {self.kind.value}")
        if self.patch is not None and (self.patch[0] < 1 or self.patch[1] < 1):
            raise ValueError(f"patch must be positive, got {self.patch}")

    def patch_for(self, h: int, w: int) -> tuple[int, int]:
        return self.patch if self.patch is not None else default_patch(h, w)

    def __str__(self):
        if self.kind is Kind.CENTER:
            return "center"
        return f"{self.kind.value}:{self.variant}"


@dataclass(frozen=True)
class EraseMask:
    m: np.ndarray  # (H, W) uint8, 1 = kept surround, 0 = erased
    strategy: EraseStrategy

    @property
    def n_erased(self) -> int:
        return int(self.m.size - np.count_nonzero(self.m))

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.m))

    @property
    def erased(self) -> np.ndarray:
        return self.m == 0


@dataclass
class ErasedPair:
    x_r: np.ndarray
    x_f: np.ndarray
    mask: EraseMask


def patch_origin(strategy: EraseStrategy, h: int, w: int) -> tuple[int, int]:
    """Top-left (row, col) of the erased rectangle."""
    ph, pw = strategy.patch_for(h, w)
    if ph > h or pw > w:
        raise ValueError(f"patch {ph}x{pw} does not fit in a {h}x{w} image")
    if ph == h and pw == w:
        raise ValueError("patch may not cover the whole image")
    v = strategy.variant
    if strategy.kind is Kind.CENTER:
        return (h - ph) // 2, (w - pw) // 2
    if strategy.kind is Kind.CORNER:
        top = 0 if v in (0, 1) else h - ph
        left = 0 if v in (0, 2) else w - pw
        return top, left
    # side: patch centred on the midpoint of edge v, clipped flush to that edge
    if v == 0:
        return 0, (w - pw) // 2
    if v == 1:
        return (h - ph) // 2, w - pw
    if v == 2:
        return h - ph, (w - pw) // 2
    return (h - ph) // 2, 0


def build_mask(strategy: EraseStrategy, h: int, w: int) -> EraseMask:
    top, left = patch_origin(strategy, h, w)
    ph, pw = strategy.patch_for(h, w)
    m = np.ones((h, w), dtype=np.uint8)
    m[top:top + ph, left:left + pw] = 0
    return EraseMask(m, strategy)


def apply_mask(x: np.ndarray, mask: EraseMask) -> ErasedPair:
    """Split ``x`` (..., H, W) into surround and erased patch."""
    if x.shape[-2:] != mask.m.shape:
        raise ValueError(f"image spatial dims {x.shape[-2:]} do not match mask {mask.m.shape}")
    m = mask.m.astype(x.dtype)
    x_r = x * m
    x_f = x - x_r
    return ErasedPair(x_r, x_f, mask)


def strategy_variants(kind: Kind | str, patch: tuple[int, int] | None = None) -> list[EraseStrategy]:
    kind = Kind(kind)
    return [EraseStrategy(kind, v, patch) for v in range(N_VARIANTS[kind])]


def parse_strategy(text: str) -> list[EraseStrategy]:
    """Parse ``center``, ``corner:0..3``, ``side:0..3``, ``corner:*`` or ``side:*``."""
    text = text.strip().lower()
    name, _, arg = text.partition(":")
    try:
        kind = Kind(name)
    except ValueError:
        raise ValueError(f"unknown erasing strategy {text!r}") from None
    if kind is Kind.CENTER:
        if arg not in ("", "0", "*"):
            raise ValueError(f"center takes no variant, got {text!r}")
        return [EraseStrategy(kind)]
    if arg in ("", "*"):
        return strategy_variants(kind)
    try:
        v = int(arg)
    except ValueError:
        raise ValueError(f"bad variant in {text!r}") from None
    return [EraseStrategy(kind, v)]


def format_strategy(strategies: list[EraseStrategy]) -> str:
    if len(strategies) == 1:
        return str(strategies[0])
    return f"{strategies[0].kind.value}:*"


def mask_stack(masks: list[EraseMask]) -> np.ndarray:
    """(N, H, W) array of mask values, one mask per sample."""
    return np.stack([mk.m for mk in masks])
