"""speechvgg: a transferable speech feature extractor.

A VGG-shaped convolutional network trained on spoken-word
classification over log-magnitude spectrograms, exposing pooling-tap
activations for deep feature losses, compact embeddings for downstream
classifiers, fine-tuning modes, and activation-maximization
visualization.
"""

from .augment import AugmentPolicy, spec_augment
from .data import (
    DatasetManifest,
    Dictionary,
    ManifestEntry,
    PaddedExample,
    WordAlignment,
    build_dictionary,
    canvas_from_audio,
    extract_segment,
    make_batches,
    pad_to_canvas,
    parse_alignments,
)
from .dream import DreamConfig, maximize_activation, render
from .dsp import (
    AudioBuffer,
    ComplexSpectrogram,
    LogMagSpectrogram,
    NormStats,
    StftConfig,
    compute_norm_stats,
    istft,
    load_wav,
    log_magnitude,
    normalize,
    save_wav,
    stft,
)
from .errors import CheckpointError, DataError
from .features import (
    Embedding,
    deep_feature_loss,
    deep_feature_loss_grad,
    embed_recording,
    sliding_predictions,
)
from .model import (
    ModelConfig,
    SpeechVGG,
    build,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
    swap_head,
)
from .train import MetricsLog, TrainConfig, evaluate, fine_tune, train_word_classifier

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "AugmentPolicy",
    "CheckpointError",
    "ComplexSpectrogram",
    "DataError",
    "DatasetManifest",
    "Dictionary",
    "DreamConfig",
    "Embedding",
    "LogMagSpectrogram",
    "ManifestEntry",
    "MetricsLog",
    "ModelConfig",
    "NormStats",
    "PaddedExample",
    "SpeechVGG",
    "StftConfig",
    "TrainConfig",
    "WordAlignment",
    "build",
    "build_dictionary",
    "canvas_from_audio",
    "compute_norm_stats",
    "deep_feature_loss",
    "deep_feature_loss_grad",
    "embed_recording",
    "evaluate",
    "extract_segment",
    "fine_tune",
    "istft",
    "load_checkpoint",
    "load_wav",
    "log_magnitude",
    "make_batches",
    "maximize_activation",
    "normalize",
    "pad_to_canvas",
    "parse_alignments",
    "render",
    "save_checkpoint",
    "save_wav",
    "set_trainable",
    "sliding_predictions",
    "spec_augment",
    "stft",
    "swap_head",
    "train_word_classifier",
]
