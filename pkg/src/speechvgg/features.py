"""Transfer-learning readouts over a fixed pre-trained extractor.

Deep feature losses compare two canvases through the extractor's
pooling taps; recording-level embeddings average the compact last-tap
representation over sampled 1024-ms segments; sliding predictions
average softmax outputs of a half-overlapping window over a recording.
The extractor itself is never modified here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import canvas_from_audio
from .dsp import AudioBuffer, NormStats, StftConfig
from .errors import DataError
from .model import NUM_BLOCKS, SpeechVGG
from .nn import softmax
from .seeding import rng_for

SEGMENT_MS = 1024
SEGMENT_SAMPLES = 16384  # 1024 ms at 16 kHz
WINDOW_STRIDE = SEGMENT_SAMPLES // 2

ALL_TAPS = tuple(range(1, NUM_BLOCKS + 1))


@dataclass
class Embedding:
    """Averaged compact representation of one recording."""

    values: np.ndarray
    source: str = ""
    num_segments: int = 1


def _check_canvas_pair(model: SpeechVGG, x: np.ndarray, y: np.ndarray):
    h, w = model.config.input_shape
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != (h, w) or y.shape != (h, w):
        raise ValueError(f"expected two {h}x{w} canvases, got {x.shape} and {y.shape}")
    return x.astype(model.dtype, copy=False), y.astype(model.dtype, copy=False)


def _check_taps(taps) -> tuple:
    taps = tuple(taps)
    if not taps or any(t not in ALL_TAPS for t in taps):
        raise ValueError(f"tap indices must be a non-empty subset of {ALL_TAPS}")
    return taps


def deep_feature_loss(model: SpeechVGG, x: np.ndarray, y: np.ndarray, taps=ALL_TAPS) -> float:
    """Sum over pooling taps of the mean absolute activation difference.

    Per-tap means keep blocks with large activation maps from dominating
    the sum. Zero when x and y are identical; symmetric in x and y.
    """
    taps = _check_taps(taps)
    x, y = _check_canvas_pair(model, x, y)
    acts = model.forward_convs(np.stack([x, y])[:, None, :, :])
    return float(
        sum(np.abs(acts[t - 1][0] - acts[t - 1][1]).mean(dtype=np.float64) for t in taps)
    )


def deep_feature_loss_grad(model: SpeechVGG, x: np.ndarray, y: np.ndarray, taps=ALL_TAPS):
    """(loss, dloss/dx) with y treated as the fixed target.

    The gradient flows only into the input, never into the extractor's
    parameters, so the model can drive the training of external systems.
    """
    taps = _check_taps(taps)
    x, y = _check_canvas_pair(model, x, y)
    acts_x = model.forward_convs(x[None, None], cache=True)
    acts_y = model.forward_convs(y[None, None], cache=False)
    loss = 0.0
    tap_grads = [None] * NUM_BLOCKS
    for t in taps:
        diff = acts_x[t - 1] - acts_y[t - 1]
        loss += float(np.abs(diff).mean(dtype=np.float64))
        tap_grads[t - 1] = np.sign(diff) / diff.size
    grad = model.backward_convs(tap_grads)
    return loss, grad[0, 0]


def _segment_canvas(model, samples, stats, config):
    return canvas_from_audio(AudioBuffer(samples), stats, config, rng=None)


def _resolve_stats(model: SpeechVGG, stats: NormStats | None) -> NormStats:
    stats = stats or model.norm_stats
    if stats is None:
        raise ValueError("no normalization stats: pass stats or use a trained checkpoint")
    return stats


def embed_recording(
    model: SpeechVGG,
    audio: AudioBuffer,
    stats: NormStats | None = None,
    num_segments: int = 20,
    rng: np.random.Generator | int | None = None,
    source: str = "",
    config: StftConfig | None = None,
) -> Embedding:
    """Mean embedding of uniformly sampled 1024-ms segments of a recording.

    Segment start offsets are drawn with replacement over the valid
    range; recordings shorter than 1024 ms are rejected.
    """
    stats = _resolve_stats(model, stats)
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    n = len(audio)
    if n < SEGMENT_SAMPLES:
        raise DataError(
            f"recording of {audio.duration_ms:.0f} ms is shorter than {SEGMENT_MS} ms"
        )
    if rng is None or isinstance(rng, int):
        rng = rng_for(rng or 0, "embed_recording")
    starts = rng.integers(0, n - SEGMENT_SAMPLES + 1, size=num_segments)
    canvases = [
        _segment_canvas(model, audio.samples[s : s + SEGMENT_SAMPLES], stats, config)
        for s in starts
    ]
    batch = np.stack(canvases)[:, None, :, :].astype(model.dtype)
    embeddings = model.embed_batch(batch)
    # reduce in float64 so the average is independent of segment order
    mean = embeddings.mean(axis=0, dtype=np.float64)
    return Embedding(mean, source=source, num_segments=num_segments)


def window_starts(num_samples: int) -> list:
    """Start offsets for 1024-ms windows at 50% overlap covering a recording.

    Full windows step by 512 ms; when they do not reach the end, one
    trailing partial window is appended.
    """
    if num_samples < SEGMENT_SAMPLES:
        raise DataError(f"recording shorter than {SEGMENT_MS} ms")
    full = (num_samples - SEGMENT_SAMPLES) // WINDOW_STRIDE
    starts = [k * WINDOW_STRIDE for k in range(full + 1)]
    if starts[-1] + SEGMENT_SAMPLES < num_samples:
        starts.append((full + 1) * WINDOW_STRIDE)
    return starts


def sliding_predictions(
    model: SpeechVGG,
    audio: AudioBuffer,
    stats: NormStats | None = None,
    config: StftConfig | None = None,
) -> np.ndarray:
    """Class distribution averaged over a sliding 1024-ms window (50% overlap).

    The trailing partial window, when present, is zero-padded on the
    canvas like any short segment.
    """
    stats = _resolve_stats(model, stats)
    starts = window_starts(len(audio))
    canvases = [
        _segment_canvas(model, audio.samples[s : s + SEGMENT_SAMPLES], stats, config)
        for s in starts
    ]
    batch = np.stack(canvases)[:, None, :, :].astype(model.dtype)
    logits, _ = model.forward_with_taps(batch)
    return softmax(logits).mean(axis=0)


def write_embeddings_tsv(path, embeddings) -> None:
    """recording_id <TAB> v0 <TAB> ... — one row per embedding."""
    with open(path, "w", encoding="utf-8") as fh:
        for emb in embeddings:
            values = "\t".join(repr(float(v)) for v in emb.values)
            fh.write(f"{emb.source}\t{values}\n")


def read_embeddings_tsv(path):
    """Parse the TSV written by :func:`write_embeddings_tsv`.

    Returns (ids, matrix) with one matrix row per id.
    """
    ids = []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}: line {lineno}: expected id and values")
            try:
                rows.append(np.array([float(v) for v in parts[1:]]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            ids.append(parts[0])
    if rows and any(r.size != rows[0].size for r in rows):
        raise DataError(f"{path}: inconsistent embedding dimensions")
    return ids, (np.stack(rows) if rows else np.empty((0, 0)))
