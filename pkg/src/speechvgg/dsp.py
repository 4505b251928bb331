"""Waveform I/O and the STFT / log-magnitude front-end.

Audio enters as 16 kHz PCM16 mono waveforms and leaves as per-channel
normalized log-magnitude spectrograms, the representation every later
stage consumes. All functions are pure; spectrogram objects are treated
as immutable.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PIPELINE_SAMPLE_RATE = 16000

# Added to magnitudes before the log so outputs stay finite; far below
# the energy of normalized speech.
LOG_FLOOR = 1e-9

# Minimum per-channel standard deviation; avoids division blow-up on
# silent frequency channels.
STD_FLOOR = 1e-6


@dataclass
class AudioBuffer:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 256
    hop: int = 128
    num_bins: int = 128
    window_fn: str = "hann"

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.window_len:
            raise ValueError("hop must be in [1, window_len]")
        if not 1 <= self.num_bins <= self.window_len // 2 + 1:
            raise ValueError("num_bins must be in [1, window_len/2 + 1]")
        if self.window_fn not in ("hann", "rect"):
            raise ValueError(f"unknown window_fn {self.window_fn!r}")

    def window(self) -> np.ndarray:
        n = self.window_len
        if self.window_fn == "rect":
            return np.ones(n)
        # periodic Hann: satisfies constant overlap-add at 50% overlap
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_len:
            raise DataError(
                f"input of {num_samples} samples is shorter than one "
                f"window ({self.window_len} samples)"
            )
        return (num_samples - self.window_len) // self.hop + 1


@dataclass
class ComplexSpectrogram:
    """Windowed DFT frames.

    ``full_values`` keeps the entire one-sided spectrum
    (window_len/2 + 1 bins) so the transform stays invertible for
    testing; ``values`` exposes the first ``num_bins`` bins used by the
    rest of the pipeline.
    """

    full_values: np.ndarray
    config: StftConfig
    sample_rate: int = PIPELINE_SAMPLE_RATE

    @property
    def values(self) -> np.ndarray:
        return self.full_values[: self.config.num_bins]

    @property
    def num_frames(self) -> int:
        return self.full_values.shape[1]


@dataclass
class LogMagSpectrogram:
    """num_bins x num_frames matrix of log STFT magnitudes."""

    values: np.ndarray
    normalized: bool = False

    @property
    def num_bins(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> AudioBuffer:
    """Read a RIFF PCM16 little-endian mono WAV at 16 kHz.

    int16 samples are scaled to [-1, 1] by dividing by 32768. There is
    no implicit resampling or downmixing; anything but the supported
    encoding is rejected with a distinct error.
    """
    try:
        reader = wave.open(str(path), "rb")
    except FileNotFoundError:
        raise
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable RIFF WAV file ({exc})") from exc
    with reader:
        if reader.getnchannels() != 1:
            raise DataError(
                f"{path}: unsupported channel count {reader.getnchannels()} "
                "(mono required)"
            )
        if reader.getsampwidth() != 2 or reader.getcomptype() != "NONE":
            raise DataError(f"{path}: unsupported encoding (PCM16 required)")
        if reader.getframerate() != PIPELINE_SAMPLE_RATE:
            raise DataError(
                f"{path}: unsupported sample rate {reader.getframerate()} Hz "
                f"({PIPELINE_SAMPLE_RATE} required)"
            )
        raw = reader.readframes(reader.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise DataError(f"{path}: file contains no samples")
    return AudioBuffer(samples, PIPELINE_SAMPLE_RATE)


def save_wav(path, audio: AudioBuffer) -> None:
    """Write an AudioBuffer as PCM16 mono WAV (amplitudes clipped to [-1, 1])."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(audio.sample_rate)
        writer.writeframes(pcm.tobytes())


def stft(audio: AudioBuffer, config: StftConfig | None = None) -> ComplexSpectrogram:
    """Short-time Fourier transform over strictly interior frames.

    Frame t covers samples [t*hop, t*hop + window_len); there is no
    centering or edge padding, so the frame count is exactly
    floor((N - window_len) / hop) + 1.
    """
    config = config or StftConfig()
    x = np.asarray(audio.samples, dtype=np.float64)
    frames = config.num_frames(x.size)
    idx = np.arange(config.window_len)[None, :] + config.hop * np.arange(frames)[:, None]
    windowed = x[idx] * config.window()
    full = np.fft.rfft(windowed, axis=1).T
    return ComplexSpectrogram(full, config, audio.sample_rate)


def istft(spec: ComplexSpectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    Requires the full one-sided spectrum kept by stft(). Reconstruction
    is exact (up to float error) wherever window coverage is
    non-degenerate; callers compare on the interior region.
    """
    config = spec.config
    expect_bins = config.window_len // 2 + 1
    if spec.full_values.shape[0] != expect_bins:
        raise ValueError(
            f"full-resolution spectrum required ({expect_bins} bins, "
            f"got {spec.full_values.shape[0]})"
        )
    win = config.window()
    frames = np.fft.irfft(spec.full_values.T, n=config.window_len, axis=1)
    n_out = (spec.num_frames - 1) * config.hop + config.window_len
    acc = np.zeros(n_out)
    norm = np.zeros(n_out)
    wsq = win * win
    for t in range(spec.num_frames):
        start = t * config.hop
        acc[start : start + config.window_len] += frames[t] * win
        norm[start : start + config.window_len] += wsq
    out = acc / np.maximum(norm, 1e-12)
    return AudioBuffer(out, spec.sample_rate)


def log_magnitude(spec: ComplexSpectrogram) -> LogMagSpectrogram:
    """Natural log of STFT magnitudes, floored to stay finite."""
    return LogMagSpectrogram(np.log(np.abs(spec.values) + LOG_FLOOR), normalized=False)


@dataclass
class NormStats:
    """Per-frequency-channel mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std entries must be >= {STD_FLOOR}")

    @property
    def num_bins(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {
            "num_bins": int(self.num_bins),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        stats = cls(np.array(d["mean"]), np.array(d["std"]))
        if stats.num_bins != int(d["num_bins"]):
            raise DataError("norm stats vector lengths disagree with num_bins")
        return stats

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class NormAccumulator:
    """Streaming accumulator for NormStats; partial accumulators merge."""

    num_bins: int
    frames: int = 0
    total: np.ndarray = field(default=None)
    total_sq: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.num_bins)
        if self.total_sq is None:
            self.total_sq = np.zeros(self.num_bins)

    def update(self, spec: LogMagSpectrogram) -> None:
        if spec.num_bins != self.num_bins:
            raise ValueError(
                f"bin count mismatch: accumulator has {self.num_bins}, "
                f"spectrogram has {spec.num_bins}"
            )
        v = spec.values
        self.frames += v.shape[1]
        self.total += v.sum(axis=1)
        self.total_sq += (v * v).sum(axis=1)

    def merge(self, other: "NormAccumulator") -> None:
        if other.num_bins != self.num_bins:
            raise ValueError("cannot merge accumulators with different bin counts")
        self.frames += other.frames
        self.total += other.total
        self.total_sq += other.total_sq

    def finalize(self) -> NormStats:
        if self.frames == 0:
            raise DataError("no spectrogram frames accumulated")
        mean = self.total / self.frames
        var = np.maximum(self.total_sq / self.frames - mean * mean, 0.0)
        std = np.maximum(np.sqrt(var), STD_FLOOR)
        return NormStats(mean, std)


def compute_norm_stats(specs) -> NormStats:
    """Population mean/std per frequency channel over a stream of spectrograms."""
    acc = None
    for spec in specs:
        if acc is None:
            acc = NormAccumulator(spec.num_bins)
        acc.update(spec)
    if acc is None:
        raise DataError("no spectrograms provided")
    return acc.finalize()


def normalize(spec: LogMagSpectrogram, stats: NormStats) -> LogMagSpectrogram:
    """Standardize each frequency channel with the given corpus statistics."""
    if spec.normalized:
        raise ValueError("spectrogram is already normalized")
    if spec.num_bins != stats.num_bins:
        raise ValueError(
            f"bin count mismatch: spectrogram has {spec.num_bins}, "
            f"stats have {stats.num_bins}"
        )
    values = (spec.values - stats.mean[:, None]) / stats.std[:, None]
    return LogMagSpectrogram(values, normalized=True)


def denormalize(spec: LogMagSpectrogram, stats: NormStats) -> LogMagSpectrogram:
    """Inverse of :func:`normalize`."""
    if not spec.normalized:
        raise ValueError("spectrogram is not normalized")
    if spec.num_bins != stats.num_bins:
        raise ValueError("bin count mismatch")
    values = spec.values * stats.std[:, None] + stats.mean[:, None]
    return LogMagSpectrogram(values, normalized=False)
