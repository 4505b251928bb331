"""Corpus ingestion: alignments, dictionaries, word segments, canvases, batches."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dsp import AudioBuffer, LogMagSpectrogram, NormStats, StftConfig, log_magnitude, normalize, stft
from .errors import DataError
from .seeding import rng_for

CANVAS_BINS = 128
CANVAS_FRAMES = 128

ALIGNMENT_HEADER = ["utterance_id", "word", "start_sample", "end_sample"]


@dataclass(frozen=True)
class WordAlignment:
    """Sample-level word boundary inside an utterance."""

    utterance_id: str
    word: str
    start_sample: int
    end_sample: int

    def __post_init__(self):
        if not self.word:
            raise ValueError("word must be non-empty")
        if self.start_sample >= self.end_sample:
            raise ValueError("start_sample must be < end_sample")


def parse_alignments(path) -> list[WordAlignment]:
    """Parse a word alignment CSV (header: utterance_id,word,start_sample,end_sample).

    Words are lowercased. Malformed lines are reported with their line
    number. An empty file yields an empty list.
    """
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return out
    if [c.strip() for c in rows[0]] != ALIGNMENT_HEADER:
        raise DataError(
            f"{path}: line 1: expected header '{','.join(ALIGNMENT_HEADER)}'"
        )
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
        utt, word = row[0].strip(), row[1].strip().lower()
        try:
            start, end = int(row[2]), int(row[3])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: sample indices must be integers")
        if not word:
            raise DataError(f"{path}: line {lineno}: empty word")
        if start >= end:
            raise DataError(
                f"{path}: line {lineno}: start_sample {start} must be < end_sample {end}"
            )
        out.append(WordAlignment(utt, word, start, end))
    return out


@dataclass
class Dictionary:
    """Closed vocabulary mapping words to contiguous class indices."""

    word_to_class: dict
    min_word_len: int = 4

    def __post_init__(self):
        indices = sorted(self.word_to_class.values())
        if indices != list(range(len(indices))):
            raise ValueError("class indices must be 0..size-1 with no gaps")
        for word in self.word_to_class:
            if len(word) < self.min_word_len:
                raise ValueError(f"word {word!r} shorter than min_word_len")

    @property
    def size(self) -> int:
        return len(self.word_to_class)

    def content_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.word_to_class, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"min_word_len": self.min_word_len, "word_to_class": self.word_to_class},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Dictionary":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls({w: int(c) for w, c in d["word_to_class"].items()}, d["min_word_len"])


def build_dictionary(alignments, size: int, min_word_len: int = 4) -> Dictionary:
    """Top-`size` most frequent words of length >= min_word_len.

    Ranked by descending frequency, ties broken lexicographically
    ascending; class index equals rank.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    counts = Counter(a.word for a in alignments if len(a.word) >= min_word_len)
    if len(counts) < size:
        raise DataError(
            f"only {len(counts)} words of length >= {min_word_len} available, "
            f"need {size}"
        )
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    return Dictionary({word: rank for rank, (word, _) in enumerate(ranked)}, min_word_len)


def extract_segment(audio: AudioBuffer, alignment: WordAlignment) -> AudioBuffer:
    """Copy of samples [start_sample, end_sample)."""
    if alignment.end_sample > len(audio):
        raise DataError(
            f"alignment [{alignment.start_sample}, {alignment.end_sample}) exceeds "
            f"buffer of {len(audio)} samples"
        )
    return AudioBuffer(
        audio.samples[alignment.start_sample : alignment.end_sample].copy(),
        audio.sample_rate,
    )


@dataclass(frozen=True)
class ManifestEntry:
    audio: str
    alignment: WordAlignment
    label: int


@dataclass
class DatasetManifest:
    """Ordered list of (audio, alignment, class) records plus the shuffle seed."""

    entries: list
    seed: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        if not self.entries:
            return 0
        return max(e.label for e in self.entries) + 1

    def word_class_map(self) -> dict:
        """word -> class mapping implied by the entries; errors on conflicts."""
        mapping = {}
        for e in self.entries:
            word = e.alignment.word
            if word in mapping and mapping[word] != e.label:
                raise DataError(
                    f"word {word!r} maps to classes {mapping[word]} and {e.label}"
                )
            mapping[word] = e.label
        return mapping

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "audio": e.audio,
                            "utterance_id": e.alignment.utterance_id,
                            "word": e.alignment.word,
                            "start_sample": e.alignment.start_sample,
                            "end_sample": e.alignment.end_sample,
                            "class": e.label,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")

    @classmethod
    def load(cls, path, seed: int = 0) -> "DatasetManifest":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                    entry = ManifestEntry(
                        audio=d["audio"],
                        alignment=WordAlignment(
                            d["utterance_id"],
                            d["word"],
                            int(d["start_sample"]),
                            int(d["end_sample"]),
                        ),
                        label=int(d["class"]),
                    )
                except (KeyError, ValueError, json.JSONDecodeError) as exc:
                    raise DataError(f"{path}: line {lineno}: {exc}") from exc
                if entry.label < 0:
                    raise DataError(f"{path}: line {lineno}: negative class index")
                entries.append(entry)
        return cls(entries, seed=seed)


def manifest_from_alignments(alignments, dictionary: Dictionary, audio_for, seed: int = 0) -> DatasetManifest:
    """Build a manifest from alignments whose word is in the dictionary.

    ``audio_for`` maps an utterance_id to its WAV path.
    """
    entries = [
        ManifestEntry(str(audio_for(a.utterance_id)), a, dictionary.word_to_class[a.word])
        for a in alignments
        if a.word in dictionary.word_to_class
    ]
    return DatasetManifest(entries, seed=seed)


def pad_to_canvas(spec: LogMagSpectrogram, rng: np.random.Generator):
    """Place a normalized 128-bin spectrogram on a 128x128 zero canvas.

    Up to 128 frames the block lands at a uniformly random time offset;
    longer inputs get a uniformly random contiguous 128-frame crop. The
    frequency axis is never padded. Returns (canvas, (freq_off, time_off)).
    """
    if spec.num_bins != CANVAS_BINS:
        raise ValueError(f"expected {CANVAS_BINS} frequency bins, got {spec.num_bins}")
    if not spec.normalized:
        raise ValueError("spectrogram must be normalized before padding")
    frames = spec.num_frames
    if frames > CANVAS_FRAMES:
        start = int(rng.integers(0, frames - CANVAS_FRAMES + 1))
        return spec.values[:, start : start + CANVAS_FRAMES].copy(), (0, 0)
    offset = int(rng.integers(0, CANVAS_FRAMES - frames + 1))
    canvas = np.zeros((CANVAS_BINS, CANVAS_FRAMES), dtype=spec.values.dtype)
    canvas[:, offset : offset + frames] = spec.values
    return canvas, (0, offset)


def place_centered(spec: LogMagSpectrogram):
    """Deterministic canvas placement used at evaluation and inference time.

    The block (or a center crop of an over-long input) is centered on the
    time axis. Returns (canvas, (freq_off, time_off)).
    """
    if spec.num_bins != CANVAS_BINS:
        raise ValueError(f"expected {CANVAS_BINS} frequency bins, got {spec.num_bins}")
    if not spec.normalized:
        raise ValueError("spectrogram must be normalized before padding")
    frames = spec.num_frames
    if frames > CANVAS_FRAMES:
        start = (frames - CANVAS_FRAMES) // 2
        return spec.values[:, start : start + CANVAS_FRAMES].copy(), (0, 0)
    offset = (CANVAS_FRAMES - frames) // 2
    canvas = np.zeros((CANVAS_BINS, CANVAS_FRAMES), dtype=spec.values.dtype)
    canvas[:, offset : offset + frames] = spec.values
    return canvas, (0, offset)


@dataclass
class PaddedExample:
    """A 128x128 canvas with its class label and placement record."""

    canvas: np.ndarray
    label: int
    pad_offset: tuple = (0, 0)


def canvas_from_audio(
    audio: AudioBuffer,
    stats: NormStats,
    config: StftConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Full front-end for one segment: stft -> log -> normalize -> canvas.

    With an rng the placement is the training-time random pad; without
    one it is the deterministic centered placement.
    """
    spec = normalize(log_magnitude(stft(audio, config)), stats)
    if rng is None:
        canvas, _ = place_centered(spec)
    else:
        canvas, _ = pad_to_canvas(spec, rng)
    return canvas


def make_batches(manifest: DatasetManifest, batch_size: int, epoch: int) -> list:
    """Deterministically shuffled index batches for one epoch.

    The permutation is keyed on (manifest.seed, epoch) only; the final
    short batch is retained.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not manifest.entries:
        raise DataError("empty manifest")
    perm = rng_for(manifest.seed, "batches", epoch).permutation(len(manifest.entries))
    return [
        [int(i) for i in perm[start : start + batch_size]]
        for start in range(0, len(perm), batch_size)
    ]
