"""Clip container plus the two training-time augmentations.

Frame skipping drops each frame independently with probability ``lam``;
in-frame erasing zeroes one shared random pixel set in every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .config import ConfigError
from .tensors import RngStream


@dataclass
class Clip:
    """A ``(P, C, H, W)`` block of intensities in [0, 1].

    ``indices`` holds each frame's position in the source clip, so a skipped
    clip still knows where its frames came from.
    """

    values: np.ndarray
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ValueError(f"clip must be (P, C, H, W), got shape {self.values.shape}")
        if self.values.shape[0] < 1:
            raise ValueError("clip must contain at least one frame")
        if self.indices is None:
            self.indices = np.arange(self.values.shape[0])
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape != (self.values.shape[0],):
            raise ValueError("one source index per frame required")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    def validate_range(self) -> None:
        v = self.values
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("clip values must lie in [0, 1]")


@dataclass
class PixelMask:
    positions: np.ndarray  # (n, 2) row, col
    indicator: np.ndarray  # (H, W); 0 on erased positions, 1 elsewhere

    @property
    def count(self) -> int:
        return len(self.positions)


@dataclass
class AugmentConfig:
    lambda_min: float = 0.2
    lambda_max: float = 0.4
    erase_ratio: float = 0.2
    skip: bool = True
    erase: bool = True

    def validate(self) -> "AugmentConfig":
        if not (0 <= self.lambda_min <= self.lambda_max < 1):
            raise ConfigError(
                f"lambda range must satisfy 0 <= min <= max < 1, got [{self.lambda_min}, {self.lambda_max}]"
            )
        _check_fraction(self.erase_ratio, "erase ratio")
        return self


def _check_fraction(x: float, what: str) -> None:
    if not (0 <= x < 1):
        raise ConfigError(f"{what} must lie in [0, 1), got {x}")


def erase_count(ratio: float, height: int, width: int) -> int:
    """``floor(ratio * H * W)`` evaluated on the decimal value of ``ratio``.

    Going through ``Fraction(repr(...))`` avoids binary round-off
    (``0.29 * 100`` is 28.999... in floating point).
    """
    return math.floor(Fraction(repr(float(ratio))) * height * width)


def frame_skip(clip: Clip, lam: float, rng: RngStream) -> tuple[Clip, np.ndarray]:
    """Keep each frame with probability ``1 - lam``; returns the clip and the 0/1 mask.

    An all-drop draw force-keeps one uniformly chosen frame.
    """
    _check_fraction(lam, "lambda")
    p = clip.num_frames
    keep = rng.gen.random(p) < 1.0 - lam
    if not keep.any():
        keep[rng.gen.integers(p)] = True
    mask = keep.astype(np.uint8)
    return Clip(clip.values[keep], clip.indices[keep]), mask


def pixel_erase(clip: Clip, ratio: float, rng: RngStream) -> tuple[Clip, PixelMask]:
    """Zero the same ``floor(ratio*H*W)`` pixel positions, all channels, in every frame."""
    _check_fraction(ratio, "erase ratio")
    _, _, h, w = clip.shape
    n = erase_count(ratio, h, w)
    flat = rng.gen.choice(h * w, size=n, replace=False) if n else np.empty(0, dtype=np.int64)
    indicator = np.ones(h * w, dtype=clip.values.dtype)
    indicator[flat] = 0
    indicator = indicator.reshape(h, w)
    positions = np.stack(np.unravel_index(flat, (h, w)), axis=1)
    values = clip.values * indicator if n else clip.values.copy()
    return Clip(values, clip.indices.copy()), PixelMask(positions, indicator)


def augment_clip(clip: Clip, cfg: AugmentConfig, rng: RngStream) -> Clip:
    """Frame skipping then pixel erasing, with one ``lam`` drawn per clip."""
    cfg.validate()
    out = clip
    if cfg.skip:
        lam = rng.gen.uniform(cfg.lambda_min, cfg.lambda_max)
        out, _ = frame_skip(out, lam, rng)
    if cfg.erase:
        out, _ = pixel_erase(out, cfg.erase_ratio, rng)
    return out
