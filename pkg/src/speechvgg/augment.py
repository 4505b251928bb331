"""Block masking over time and frequency applied to padded training canvases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CANVAS_BINS, CANVAS_FRAMES


@dataclass(frozen=True)
class AugmentPolicy:
    """Masking policy: per-dimension cap, mask counts, fill mode.

    Per-mask widths are drawn uniformly in [0, cap // num_masks] so the
    total masked width per dimension can never exceed
    max_fraction_per_dim of the canvas.
    """

    max_fraction_per_dim: float = 0.5
    num_time_masks: int = 2
    num_freq_masks: int = 2
    fill: str = "example_mean"

    def __post_init__(self):
        if not 0.0 <= self.max_fraction_per_dim <= 1.0:
            raise ValueError("max_fraction_per_dim must be in [0, 1]")
        if self.num_time_masks < 0 or self.num_freq_masks < 0:
            raise ValueError("mask counts must be >= 0")
        if self.fill != "example_mean":
            raise ValueError(f"unknown fill mode {self.fill!r}")

    def to_dict(self) -> dict:
        return {
            "max_fraction_per_dim": self.max_fraction_per_dim,
            "num_time_masks": self.num_time_masks,
            "num_freq_masks": self.num_freq_masks,
            "fill": self.fill,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(**d)


def spec_augment(canvas: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Replace random contiguous frequency rows and time columns with the canvas mean.

    Frequency masks are drawn before time masks; each mask draws its
    width, then its position. Cells outside all masks are bit-identical
    to the input.
    """
    if canvas.shape != (CANVAS_BINS, CANVAS_FRAMES):
        raise ValueError(f"expected {CANVAS_BINS}x{CANVAS_FRAMES} canvas, got {canvas.shape}")
    out = canvas.copy()
    fill = canvas.mean(dtype=np.float64)
    for axis, num_masks in ((0, policy.num_freq_masks), (1, policy.num_time_masks)):
        size = canvas.shape[axis]
        cap = int(policy.max_fraction_per_dim * size)
        if num_masks == 0 or cap == 0:
            continue
        per_mask = cap // num_masks
        if per_mask == 0:
            continue
        for _ in range(num_masks):
            width = int(rng.integers(0, per_mask + 1))
            if width == 0:
                continue
            start = int(rng.integers(0, size - width + 1))
            if axis == 0:
                out[start : start + width, :] = fill
            else:
                out[:, start : start + width] = fill
    return out
