"""Training loops: word-classification pre-training and the three fine-tuning modes.

The per-example pipeline is extract -> stft -> log -> normalize -> pad
-> augment -> forward/backward -> ADAM. Source spectrograms are cached
across epochs (they are deterministic per entry); padding and masking
draw from per-(seed, epoch, entry) streams so results depend only on
(seed, data, config), never on worker scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentPolicy, spec_augment
from .data import DatasetManifest, extract_segment, log_magnitude, make_batches, normalize, pad_to_canvas, place_centered
from .dsp import NormAccumulator, NormStats, StftConfig, load_wav, stft
from .errors import DataError
from .model import ModelConfig, SpeechVGG, build, set_trainable, swap_head
from .nn import Adam, softmax_cross_entropy
from .seeding import rng_for

FINE_TUNE_MODES = ("fresh", "frozen", "finetune")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-5
    batch_size: int = 64
    seed: int = 0
    augment: AugmentPolicy | None = field(default_factory=AugmentPolicy)
    eval_every: int = 0
    workers: int = 0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MetricsLog:
    """Per-step losses and per-evaluation accuracies, with wall-clock."""

    steps: list = field(default_factory=list)   # (step, epoch, loss)
    evals: list = field(default_factory=list)   # (step, epoch, train_acc, val_acc, seconds)

    def core_fields(self):
        """Deterministic content: everything except wall-clock seconds."""
        return (
            [(s, e, loss) for s, e, loss in self.steps],
            [(s, e, ta, va) for s, e, ta, va, _ in self.evals],
        )

    def final_val_acc(self) -> float:
        if not self.evals:
            raise ValueError("no evaluations recorded")
        return self.evals[-1][3]

    def best_val_acc(self) -> float:
        return max(r[3] for r in self.evals)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "epoch", "loss", "train_acc", "val_acc", "seconds"])
            rows = [(s, e, repr(l), "", "", "") for s, e, l in self.steps]
            rows += [
                (s, e, "", repr(ta), repr(va), f"{sec:.3f}")
                for s, e, ta, va, sec in self.evals
            ]
            for row in sorted(rows, key=lambda r: (r[0], r[2] != "")):
                writer.writerow(row)


class _SpectrogramCache:
    """Normalized source spectrograms per manifest entry, computed once."""

    def __init__(self, manifest: DatasetManifest, config: StftConfig, stats: NormStats):
        self.manifest = manifest
        self.config = config
        self.stats = stats
        self._audio = {}
        self._specs = {}

    def audio(self, path: str):
        if path not in self._audio:
            self._audio[path] = load_wav(path)
        return self._audio[path]

    def spec(self, index: int):
        entry = self.manifest.entries[index]
        key = (entry.audio, entry.alignment.start_sample, entry.alignment.end_sample)
        if key not in self._specs:
            segment = extract_segment(self.audio(entry.audio), entry.alignment)
            self._specs[key] = normalize(
                log_magnitude(stft(segment, self.config)), self.stats
            )
        return self._specs[key]


def _raw_spectrograms(manifest: DatasetManifest, config: StftConfig):
    """Un-normalized log-magnitude spectrograms of every manifest entry."""
    audio_cache = {}
    for entry in manifest.entries:
        if entry.audio not in audio_cache:
            audio_cache[entry.audio] = load_wav(entry.audio)
        segment = extract_segment(audio_cache[entry.audio], entry.alignment)
        yield log_magnitude(stft(segment, config))


def norm_stats_for_manifest(manifest: DatasetManifest, config: StftConfig | None = None) -> NormStats:
    """Per-channel normalization statistics over a (training) manifest."""
    if not manifest.entries:
        raise DataError("empty manifest")
    config = config or StftConfig()
    acc = NormAccumulator(config.num_bins)
    for spec in _raw_spectrograms(manifest, config):
        acc.update(spec)
    return acc.finalize()


def _check_labels(manifest: DatasetManifest, num_classes: int, what: str) -> None:
    for entry in manifest.entries:
        if entry.label >= num_classes:
            raise DataError(
                f"class overflow: {what} contains label {entry.label}, "
                f"model has {num_classes} classes"
            )


def _check_shared_dictionary(train: DatasetManifest, val: DatasetManifest) -> None:
    train_map = train.word_class_map()
    val_map = val.word_class_map()
    for word, label in val_map.items():
        if word in train_map and train_map[word] != label:
            raise DataError(
                f"dictionary mismatch: word {word!r} is class {train_map[word]} in "
                f"the training manifest but {label} in the validation manifest"
            )


def _train_canvas(cache: _SpectrogramCache, index: int, epoch: int, seed: int, policy):
    spec = cache.spec(index)
    canvas, _ = pad_to_canvas(spec, rng_for(seed, "pad", epoch, index))
    if policy is not None:
        canvas = spec_augment(canvas, policy, rng_for(seed, "augment", epoch, index))
    return canvas


def _eval_canvases(manifest: DatasetManifest, cache: _SpectrogramCache, dtype):
    canvases = [place_centered(cache.spec(i))[0] for i in range(len(manifest.entries))]
    x = np.stack(canvases)[:, None, :, :].astype(dtype)
    y = np.array([e.label for e in manifest.entries])
    return x, y


def _predict_batched(model: SpeechVGG, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model.forward_with_taps(x[start : start + batch_size])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def _accuracy_and_confusion(preds: np.ndarray, labels: np.ndarray, num_classes: int):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return float(np.trace(confusion) / labels.size), confusion


def evaluate(model: SpeechVGG, manifest: DatasetManifest, config: StftConfig | None = None):
    """Single-example, non-augmented accuracy and confusion matrix.

    Preprocessing uses the model's stored normalization stats and the
    deterministic centered canvas placement.
    """
    if not manifest.entries:
        raise DataError("empty manifest")
    if model.norm_stats is None:
        raise ValueError("model has no normalization stats attached")
    _check_labels(manifest, model.config.num_classes, "manifest")
    cache = _SpectrogramCache(manifest, config or StftConfig(), model.norm_stats)
    x, y = _eval_canvases(manifest, cache, model.dtype)
    preds = _predict_batched(model, x)
    return _accuracy_and_confusion(preds, y, model.config.num_classes)


def _run_training(
    model: SpeechVGG,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig,
    step_callback=None,
) -> MetricsLog:
    if not train_manifest.entries or not val_manifest.entries:
        raise DataError("empty manifest")
    _check_labels(train_manifest, model.config.num_classes, "training manifest")
    _check_labels(val_manifest, model.config.num_classes, "validation manifest")

    train_cache = _SpectrogramCache(train_manifest, config.stft, model.norm_stats)
    val_cache = _SpectrogramCache(val_manifest, config.stft, model.norm_stats)
    val_x, val_y = _eval_canvases(val_manifest, val_cache, model.dtype)

    shuffled = replace_seed(train_manifest, config.seed)
    optimizer = Adam(model.params(), lr=config.lr)
    metrics = MetricsLog()
    started = time.perf_counter()
    step = 0
    best = (-1.0, None)

    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 0 else None
    try:
        for epoch in range(config.epochs):
            correct = 0
            seen = 0
            for batch in make_batches(shuffled, config.batch_size, epoch):
                prep = lambda i: _train_canvas(
                    train_cache, i, epoch, config.seed, config.augment
                )
                canvases = list(executor.map(prep, batch)) if executor else [prep(i) for i in batch]
                x = np.stack(canvases)[:, None, :, :].astype(model.dtype)
                y = np.array([train_manifest.entries[i].label for i in batch])

                logits, _ = model.forward_with_taps(x, cache=True)
                loss, grad = softmax_cross_entropy(logits, y)
                model.backward(grad)
                optimizer.step()

                correct += int((logits.argmax(axis=1) == y).sum())
                seen += len(batch)
                step += 1
                metrics.steps.append((step, epoch, loss))
                if config.eval_every and step % config.eval_every == 0:
                    preds = _predict_batched(model, val_x)
                    val_acc, _ = _accuracy_and_confusion(preds, val_y, model.config.num_classes)
                    metrics.evals.append(
                        (step, epoch, correct / seen, val_acc, time.perf_counter() - started)
                    )
                if step_callback is not None:
                    step_callback(model, step)

            preds = _predict_batched(model, val_x)
            val_acc, _ = _accuracy_and_confusion(preds, val_y, model.config.num_classes)
            metrics.evals.append(
                (step, epoch, correct / seen, val_acc, time.perf_counter() - started)
            )
            if val_acc > best[0]:
                best = (val_acc, [p.value.copy() for p in model.params()])
    finally:
        if executor:
            executor.shutdown()

    if best[1] is not None:
        for p, v in zip(model.params(), best[1]):
            p.value = v
    model.meta = dict(model.meta)
    model.meta.update(
        {
            "epochs": config.epochs,
            "lr": config.lr,
            "batch_size": config.batch_size,
            "seed": config.seed,
            "best_val_acc": best[0],
        }
    )
    return metrics


def replace_seed(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    return DatasetManifest(manifest.entries, seed=seed)


def train_word_classifier(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step_callback=None,
):
    """Pre-train the extractor on word classification.

    Normalization stats come from the training manifest only; the model
    retaining the best validation accuracy is returned.
    """
    if not train_manifest.entries or not val_manifest.entries:
        raise DataError("empty manifest")
    _check_shared_dictionary(train_manifest, val_manifest)

    stats = norm_stats_for_manifest(train_manifest, train_config.stft)
    model = build(model_config, train_config.seed)
    model.norm_stats = stats
    word_map = train_manifest.word_class_map()
    model.dictionary_hash = hashlib.sha256(
        json.dumps(word_map, sort_keys=True).encode("utf-8")
    ).hexdigest()
    metrics = _run_training(model, train_manifest, val_manifest, train_config, step_callback)
    return model, metrics


def fine_tune(
    base: SpeechVGG,
    mode: str,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    train_config: TrainConfig,
    step_callback=None,
):
    """Adapt a pre-trained model to a new label set.

    fresh: reinitialize everything (head swapped to the new class
    count); frozen: train the dense head only; finetune: train all
    parameters from the pre-trained weights. Normalization stats are
    inherited from the base model so inputs stay in the representation
    the extractor was trained on.
    """
    if mode not in FINE_TUNE_MODES:
        raise ValueError(f"invalid mode {mode!r}; expected one of {FINE_TUNE_MODES}")
    if not train_manifest.entries or not val_manifest.entries:
        raise DataError("empty manifest")
    if base.norm_stats is None:
        raise ValueError("base model has no normalization stats attached")
    new_classes = max(train_manifest.num_classes, val_manifest.num_classes)
    if new_classes < 2:
        raise DataError("fine-tuning needs at least 2 classes")

    if mode == "fresh":
        model = build(replace(base.config, num_classes=new_classes), train_config.seed)
        model.norm_stats = base.norm_stats
        model.dictionary_hash = base.dictionary_hash
        set_trainable(model, "all")
    else:
        model = swap_head(base, new_classes, train_config.seed)
        set_trainable(model, "head_only" if mode == "frozen" else "all")

    metrics = _run_training(model, train_manifest, val_manifest, train_config, step_callback)
    model.meta["fine_tune_mode"] = mode
    return model, metrics
