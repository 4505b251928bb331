"""Deterministic synthetic corpora for tests and demos.

Three generators, all seeded: word-like clips (a distinct chirp +
harmonic-stack template per class, plus noise), speaker-like clips (a
fixed spectral tilt and pitch factor per speaker applied to the shared
word templates), and recording-level category clips (voiced / noise /
tonal) long enough for segment-averaged embeddings.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestEntry, WordAlignment
from .dsp import PIPELINE_SAMPLE_RATE, AudioBuffer, save_wav
from .seeding import rng_for

SR = PIPELINE_SAMPLE_RATE


def _envelope(n: int, ramp_ms: float = 20.0) -> np.ndarray:
    ramp = min(int(SR * ramp_ms / 1000.0), n // 4)
    env = np.ones(n)
    if ramp:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = fade
        env[-ramp:] = fade[::-1]
    return env


def word_template(word_class: int, n: int, pitch_factor: float = 1.0) -> np.ndarray:
    """Deterministic chirp + harmonic stack for one word class."""
    t = np.arange(n) / SR
    dur = n / SR
    f0 = (400.0 + 150.0 * word_class) * pitch_factor
    f1 = 1.8 * f0
    chirp = np.sin(2.0 * np.pi * (f0 * t + (f1 - f0) * t * t / (2.0 * dur)))
    g0 = (110.0 + 25.0 * word_class) * pitch_factor
    harm = np.zeros(n)
    for k in range(1, 6):
        amp = (1.0 if (word_class + k) % 2 else 0.6) / k
        harm += amp * np.sin(2.0 * np.pi * k * g0 * t)
    harm /= np.abs(harm).max() + 1e-12
    return _envelope(n) * (0.5 * chirp + 0.5 * harm)


def _spectral_tilt(x: np.ndarray, db_per_octave: float) -> np.ndarray:
    """Reshape a waveform's spectrum by a fixed slope around 1 kHz."""
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, d=1.0 / SR)
    gain = np.ones_like(freqs)
    nonzero = freqs > 0
    gain[nonzero] = 10.0 ** (db_per_octave * np.log2(freqs[nonzero] / 1000.0) / 20.0)
    out = np.fft.irfft(spectrum * gain, n=x.size)
    return out / (np.abs(out).max() + 1e-12)


def _write_clip(path: Path, clean: np.ndarray, rng, snr_db: float, gain: float):
    noise = rng.standard_normal(clean.size)
    noise *= np.sqrt((clean**2).mean()) / np.sqrt((noise**2).mean()) * 10 ** (-snr_db / 20.0)
    clip = gain * (clean + noise)
    save_wav(path, AudioBuffer(np.clip(clip, -1.0, 1.0)))


def _word_entry(path: Path, word: str, n: int, label: int) -> ManifestEntry:
    return ManifestEntry(str(path), WordAlignment(path.stem, word, 0, n), label)


def make_word_corpus(
    out_dir,
    num_classes: int = 10,
    train_per_class: int = 50,
    val_per_class: int = 10,
    seed: int = 0,
    min_dur: float = 0.5,
    max_dur: float = 1.0,
):
    """Word-classification corpus: one template per class, noisy instances.

    Writes WAVs plus train/val manifests; returns the two manifests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": train_per_class, "val": val_per_class}
    manifests = {}
    for split, per_class in splits.items():
        entries = []
        for c in range(num_classes):
            word = f"word{c:02d}"
            for i in range(per_class):
                rng = rng_for(seed, "word", split, c, i)
                n = int(SR * rng.uniform(min_dur, max_dur))
                path = out_dir / f"{split}_{word}_{i:04d}.wav"
                _write_clip(
                    path,
                    word_template(c, n),
                    rng,
                    snr_db=rng.uniform(8.0, 15.0),
                    gain=rng.uniform(0.3, 0.6),
                )
                entries.append(_word_entry(path, word, n, c))
        manifests[split] = DatasetManifest(entries, seed=seed)
        manifests[split].save(out_dir / f"{split}_manifest.jsonl")
    return manifests["train"], manifests["val"]


def make_speaker_corpus(
    out_dir,
    num_speakers: int = 10,
    train_per_speaker: int = 40,
    val_per_speaker: int = 8,
    num_words: int = 10,
    seed: int = 0,
    min_dur: float = 0.5,
    max_dur: float = 1.0,
):
    """Speaker-identification corpus over the shared word templates.

    Each speaker is a fixed spectral tilt and pitch factor; instances
    draw a random word, so word identity carries no speaker information.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tilts = np.linspace(-8.0, 8.0, num_speakers)
    pitches = np.geomspace(0.70, 1.45, num_speakers)
    splits = {"train": train_per_speaker, "val": val_per_speaker}
    manifests = {}
    for split, per_speaker in splits.items():
        entries = []
        for s in range(num_speakers):
            for i in range(per_speaker):
                rng = rng_for(seed, "speaker", split, s, i)
                c = int(rng.integers(0, num_words))
                n = int(SR * rng.uniform(min_dur, max_dur))
                clean = _spectral_tilt(word_template(c, n, pitch_factor=pitches[s]), tilts[s])
                path = out_dir / f"{split}_spk{s:02d}_{i:04d}.wav"
                _write_clip(path, clean, rng, snr_db=rng.uniform(10.0, 16.0), gain=rng.uniform(0.3, 0.6))
                entries.append(_word_entry(path, f"word{c:02d}", n, s))
        manifests[split] = DatasetManifest(entries, seed=seed)
        manifests[split].save(out_dir / f"{split}_manifest.jsonl")
    return manifests["train"], manifests["val"]


def _category_clip(category: int, n: int, rng) -> np.ndarray:
    t = np.arange(n) / SR
    if category == 0:
        # voiced: harmonic stack with vibrato and syllable-rate modulation
        f0 = rng.uniform(120.0, 260.0)
        vibrato = 1.0 + 0.03 * np.sin(2.0 * np.pi * 5.0 * t)
        phase = 2.0 * np.pi * f0 * np.cumsum(vibrato) / SR
        x = sum(np.sin(k * phase) / k for k in range(1, 9))
        x *= 0.75 + 0.25 * np.sin(2.0 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    elif category == 1:
        # noise: white noise with a mild spectral slope
        x = rng.standard_normal(n)
        spectrum = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, d=1.0 / SR)
        alpha = rng.uniform(0.4, 0.8)
        shaping = np.ones_like(freqs)
        shaping[1:] = (freqs[1:] / freqs[1]) ** (-alpha / 2.0)
        x = np.fft.irfft(spectrum * shaping, n=n)
    else:
        # tonal: a sustained three-note chord pitched above the voiced band
        base = rng.uniform(1000.0, 2400.0)
        x = sum(np.sin(2.0 * np.pi * base * r * t) for r in (1.0, 1.26, 1.5))
    x = x / (np.abs(x).max() + 1e-12)
    return _envelope(n) * x


def make_category_corpus(
    out_dir,
    train_per_class: int = 10,
    test_per_class: int = 5,
    seed: int = 0,
    min_dur: float = 1.5,
    max_dur: float = 3.0,
):
    """Three acoustic categories (voiced / noise / tonal) as whole recordings.

    Returns (train_items, test_items) lists of (path, recording_id,
    label) and writes a labels CSV per split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": train_per_class, "test": test_per_class}
    items = {}
    for split, per_class in splits.items():
        rows = []
        for c in range(3):
            for i in range(per_class):
                rng = rng_for(seed, "category", split, c, i)
                n = int(SR * rng.uniform(min_dur, max_dur))
                clip = 0.5 * _category_clip(c, n, rng)
                clip += 0.01 * rng.standard_normal(n)
                rec_id = f"{split}_cat{c}_{i:03d}"
                path = out_dir / f"{rec_id}.wav"
                save_wav(path, AudioBuffer(np.clip(clip, -1.0, 1.0)))
                rows.append((path, rec_id, c))
        with open(out_dir / f"{split}_labels.csv", "w", encoding="utf-8") as fh:
            fh.write("recording_id,label\n")
            for _, rec_id, c in rows:
                fh.write(f"{rec_id},{c}\n")
        with open(out_dir / f"{split}_files.txt", "w", encoding="utf-8") as fh:
            for path, _, _ in rows:
                fh.write(f"{path}\n")
        items[split] = rows
    return items["train"], items["test"]
