"""Activation maximization: synthesize inputs that excite a chosen layer.

Plain gradient ascent on the input, starting from seeded Gaussian
noise, with the gradient normalized to unit RMS each step. The model is
never modified. Results are rendered as PGM images plus raw CSV dumps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SpeechVGG
from .seeding import rng_for


@dataclass(frozen=True)
class DreamConfig:
    layer: str = "tap5"
    steps: int = 200
    step_size: float = 0.05
    seed: int = 0
    smooth_sigma: float | None = None
    smooth_every: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.smooth_sigma is not None and self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be positive when set")
        if self.smooth_every < 1:
            raise ValueError("smooth_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "steps": self.steps,
            "step_size": self.step_size,
            "seed": self.seed,
            "smooth_sigma": self.smooth_sigma,
            "smooth_every": self.smooth_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DreamConfig":
        return cls(**d)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(canvas: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    kernel = _gaussian_kernel(sigma)
    r = kernel.size // 2
    out = canvas
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(r, r)], mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=-1)
        out = np.moveaxis(windows @ kernel, -1, axis)
    return out


def maximize_activation(model: SpeechVGG, config: DreamConfig):
    """Gradient-ascend a noise canvas toward high mean activation.

    Returns (canvas, trace): the final 128x128 input and the mean
    activation at every step plus the final canvas (steps + 1 values).
    """
    layer_index = model.resolve_layer(config.layer)
    h, w = model.config.input_shape
    rng = rng_for(config.seed, "dream")
    x = rng.standard_normal((1, 1, h, w)).astype(model.dtype)
    trace = []
    for step in range(config.steps):
        act = model.forward_to(x, layer_index, cache=True)
        trace.append(float(act.mean(dtype=np.float64)))
        grad = model.backward_from(layer_index, np.full_like(act, 1.0 / act.size))
        rms = np.sqrt(np.mean(grad.astype(np.float64) ** 2))
        x = x + config.step_size * (grad / (rms + 1e-8)).astype(model.dtype)
        if config.smooth_sigma and (step + 1) % config.smooth_every == 0:
            x = _blur(x[0, 0], config.smooth_sigma)[None, None].astype(model.dtype)
    final = model.forward_to(x, layer_index, cache=False)
    trace.append(float(final.mean(dtype=np.float64)))
    return x[0, 0].copy(), np.array(trace)


def render(canvas: np.ndarray, path, write_png: bool = False) -> None:
    """Write a canvas as a binary PGM (P5), with the raw matrix as CSV alongside.

    Values are min-max normalized to 0..255; a constant canvas maps to
    mid-gray (128). With ``write_png`` a PNG sibling is written too
    (requires Pillow).
    """
    canvas = np.asarray(canvas, dtype=np.float64)
    if canvas.ndim != 2:
        raise ValueError(f"expected a 2-D canvas, got shape {canvas.shape}")
    lo, hi = canvas.min(), canvas.max()
    if hi - lo < 1e-12:
        pixels = np.full(canvas.shape, 128, dtype=np.uint8)
    else:
        pixels = np.clip(np.rint((canvas - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    rows, cols = canvas.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in canvas:
            writer.writerow([repr(float(v)) for v in row])
    if write_png:
        try:
            from PIL import Image
        except ImportError as exc:
            raise RuntimeError("PNG output requires Pillow") from exc
        Image.fromarray(pixels, mode="L").save(path.with_suffix(".png"))


def save_trace(trace: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mean_activation"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])
