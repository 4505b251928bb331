"""Command-line entry point tying the pipeline together.

Subcommands: stats, train, finetune, extract, dfl, classify fit|eval,
dream. Every run is reproducible from its --seed, and every output
directory records the fully resolved configuration. Exit codes: 0
success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import features
from .augment import AugmentPolicy
from .data import DatasetManifest, canvas_from_audio
from .dream import DreamConfig, maximize_activation, render, save_trace
from .dsp import StftConfig, load_wav
from .downstream import LogRegModel, evaluate as logreg_evaluate, fit as logreg_fit
from .errors import CheckpointError, DataError
from .features import embed_recording, read_embeddings_tsv, write_embeddings_tsv
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .seeding import rng_for
from .train import FINE_TUNE_MODES, TrainConfig, fine_tune, norm_stats_for_manifest, train_word_classifier


class ConfigError(Exception):
    """Bad configuration or arguments; maps to exit code 1."""


DEFAULT_CONFIG = {
    "dataset": {"train_manifest": None, "val_manifest": None},
    "stft": {"window_len": 256, "hop": 128, "num_bins": 128, "window_fn": "hann"},
    "augment": {
        "max_fraction_per_dim": 0.5,
        "num_time_masks": 2,
        "num_freq_masks": 2,
        "fill": "example_mean",
    },
    "model": {
        "num_classes": None,
        "block_convs": [2, 2, 3, 3, 3],
        "block_channels": [64, 128, 256, 512, 512],
        "fc_dims": [4096, 4096],
        "input_shape": [128, 128],
        "width_scale": 1.0,
    },
    "train": {"epochs": 30, "lr": 5e-5, "batch_size": 64, "seed": 0, "eval_every": 0},
    "features": {"num_segments": 20},
    "dream": {
        "layer": "tap5",
        "steps": 200,
        "step_size": 0.05,
        "seed": 0,
        "smooth_sigma": None,
        "smooth_every": 10,
    },
}


def resolve_config(user: dict | None) -> dict:
    """Overlay a user config onto the defaults, rejecting unknown keys."""
    resolved = copy.deepcopy(DEFAULT_CONFIG)
    if user is None:
        return resolved
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for section, content in user.items():
        if section not in resolved:
            raise ConfigError(f"unknown config key: {section}")
        if content is None:
            resolved[section] = None
            continue
        if not isinstance(content, dict):
            raise ConfigError(f"config section '{section}' must be an object or null")
        for key, value in content.items():
            if key not in DEFAULT_CONFIG[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            resolved[section][key] = value
    return resolved


def load_config(path) -> dict:
    if path is None:
        return resolve_config(None)
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(user)


def write_resolved_config(out_dir: Path, config: dict, command: str, seed, workers) -> None:
    record = dict(config)
    record["invocation"] = {"command": command, "seed": seed, "workers": workers}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stft_config(config: dict) -> StftConfig:
    try:
        return StftConfig(**config["stft"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid stft config: {exc}") from exc


def _augment_policy(config: dict) -> AugmentPolicy | None:
    if config["augment"] is None:
        return None
    try:
        return AugmentPolicy(**config["augment"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid augment config: {exc}") from exc


def _model_config(config: dict, num_classes: int) -> ModelConfig:
    section = dict(config["model"])
    if section.get("num_classes") is None:
        section["num_classes"] = num_classes
    try:
        return ModelConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def _train_config(config: dict, args) -> TrainConfig:
    section = dict(config["train"])
    if args.seed is not None:
        section["seed"] = args.seed
        config["train"]["seed"] = args.seed
    try:
        return TrainConfig(
            **section,
            augment=_augment_policy(config),
            workers=args.workers,
            stft=_stft_config(config),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def _load_manifests(config: dict):
    dataset = config["dataset"]
    if not dataset or not dataset.get("train_manifest") or not dataset.get("val_manifest"):
        raise ConfigError("dataset.train_manifest and dataset.val_manifest are required")
    train = DatasetManifest.load(dataset["train_manifest"])
    val = DatasetManifest.load(dataset["val_manifest"])
    return train, val


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if not manifest.entries:
        raise DataError("empty manifest")
    config = load_config(args.config)
    stats = norm_stats_for_manifest(manifest, _stft_config(config))
    out = _prepare_out(args.out)
    stats.save(out / "norm_stats.json")
    write_resolved_config(out, config, "stats", args.seed, args.workers)
    print(f"wrote {out / 'norm_stats.json'} ({stats.num_bins} bins)")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    train_manifest, val_manifest = _load_manifests(config)
    if not train_manifest.entries:
        raise DataError("empty manifest")
    num_classes = max(train_manifest.num_classes, val_manifest.num_classes)
    model_config = _model_config(config, num_classes)
    train_config = _train_config(config, args)
    model, metrics = train_word_classifier(train_manifest, val_manifest, model_config, train_config)
    out = _prepare_out(args.out)
    save_checkpoint(model, out / "checkpoint.svgg")
    metrics.save_csv(out / "metrics.csv")
    write_resolved_config(out, config, "train", train_config.seed, args.workers)
    print(f"best validation accuracy: {metrics.best_val_acc():.4f}")
    print(f"wrote {out / 'checkpoint.svgg'}")
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args.config)
    base = load_checkpoint(args.checkpoint)
    train_manifest, val_manifest = _load_manifests(config)
    train_config = _train_config(args=args, config=config)
    base_conv = base.param_bytes()
    model, metrics = fine_tune(base, args.mode, train_manifest, val_manifest, train_config)
    out = _prepare_out(args.out)
    save_checkpoint(model, out / "checkpoint.svgg")
    metrics.save_csv(out / "metrics.csv")
    write_resolved_config(out, config, "finetune", train_config.seed, args.workers)
    if args.mode == "frozen":
        conv_names = [p.name for p in model.conv_params()]
        tuned = model.param_bytes()
        changed = [n for n in conv_names if tuned[n] != base_conv[n]]
        report = out / "frozen_check.txt"
        with open(report, "w", encoding="utf-8") as fh:
            if changed:
                fh.write("FAIL: conv blobs changed: " + ", ".join(changed) + "\n")
            else:
                fh.write(f"OK: all {len(conv_names)} conv blobs bitwise unchanged\n")
        if changed:
            raise RuntimeError(f"frozen run modified conv parameters: {changed}")
        print(f"frozen check: all {len(conv_names)} conv blobs unchanged")
    print(f"best validation accuracy: {metrics.best_val_acc():.4f}")
    return 0


def cmd_extract(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = load_config(args.config)
    config["features"]["num_segments"] = args.num_segments or config["features"]["num_segments"]
    with open(args.audio_list, encoding="utf-8") as fh:
        paths = [line.strip() for line in fh if line.strip()]
    embeddings = []
    skipped = 0
    for i, path in enumerate(paths):
        audio = load_wav(path)
        if len(audio) < features.SEGMENT_SAMPLES:
            print(
                f"warning: skipping {path}: {audio.duration_ms:.0f} ms is shorter "
                f"than {features.SEGMENT_MS} ms",
                file=sys.stderr,
            )
            skipped += 1
            continue
        embeddings.append(
            embed_recording(
                model,
                audio,
                num_segments=config["features"]["num_segments"],
                rng=rng_for(args.seed or 0, "extract", i),
                source=Path(path).stem,
                config=_stft_config(config),
            )
        )
    out = _prepare_out(args.out)
    write_embeddings_tsv(out / "embeddings.tsv", embeddings)
    write_resolved_config(out, config, "extract", args.seed, args.workers)
    print(f"wrote {len(embeddings)} embeddings ({skipped} skipped) to {out / 'embeddings.tsv'}")
    return 0


def cmd_dfl(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.norm_stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalization stats")
    config = load_config(args.config)
    stft_config = _stft_config(config)
    canvases = [
        canvas_from_audio(load_wav(path), model.norm_stats, stft_config)
        for path in (args.wav_a, args.wav_b)
    ]
    loss = features.deep_feature_loss(model, canvases[0], canvases[1])
    print(loss)
    if args.out:
        out = _prepare_out(args.out)
        write_resolved_config(out, config, "dfl", args.seed, args.workers)
    return 0


def _read_labels_csv(path) -> dict:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty labels file")
    if lines[0] != "recording_id,label":
        raise DataError(f"{path}: expected header 'recording_id,label'")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected 2 fields")
        try:
            labels[parts[0]] = int(parts[1])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: label must be an integer")
    return labels


def _join_embeddings(embeddings_path, labels_path):
    ids, matrix = read_embeddings_tsv(embeddings_path)
    labels = _read_labels_csv(labels_path)
    index = {rec_id: i for i, rec_id in enumerate(ids)}
    for rec_id in labels:
        if rec_id not in index:
            raise DataError(f"label id '{rec_id}' missing from embeddings TSV")
    ordered = sorted(labels)
    x = np.stack([matrix[index[r]] for r in ordered])
    y = np.array([labels[r] for r in ordered])
    return x, y


def cmd_classify_fit(args) -> int:
    x, y = _join_embeddings(args.embeddings, args.labels)
    model = logreg_fit(x, y, l2=args.l2, iters=args.iters, lr=args.lr, seed=args.seed or 0)
    out = _prepare_out(args.out)
    model.save(out / "logreg.json")
    config = load_config(args.config)
    write_resolved_config(out, config, "classify fit", args.seed, args.workers)
    acc, _ = logreg_evaluate(model, x, y)
    print(f"training accuracy: {acc:.4f}")
    print(f"wrote {out / 'logreg.json'}")
    return 0


def cmd_classify_eval(args) -> int:
    x, y = _join_embeddings(args.embeddings, args.labels)
    model = LogRegModel.load(args.model)
    acc, confusion = logreg_evaluate(model, x, y)
    print(f"accuracy: {acc:.4f}")
    print("confusion matrix (rows = true class):")
    for row in confusion:
        print(" ".join(f"{v:6d}" for v in row))
    return 0


def cmd_dream(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = load_config(args.config)
    section = dict(config["dream"])
    if args.layer:
        section["layer"] = args.layer
    if args.steps is not None:
        section["steps"] = args.steps
    if args.seed is not None:
        section["seed"] = args.seed
    config["dream"] = section
    try:
        dream_config = DreamConfig(**section)
        canvas, trace = maximize_activation(model, dream_config)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _prepare_out(args.out)
    tag = dream_config.layer
    render(canvas, out / f"dream_{tag}.pgm", write_png=args.png)
    save_trace(trace, out / f"trace_{tag}.csv")
    write_resolved_config(out, config, "dream", dream_config.seed, args.workers)
    print(
        f"mean activation {trace[0]:.6g} -> {trace[-1]:.6g}; "
        f"wrote {out / f'dream_{tag}.pgm'}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="root random seed")
    parser.add_argument("--workers", type=int, default=0, help="preprocessing threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speechvgg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="compute normalization stats for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("train", help="pre-train the word classifier")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new label set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=FINE_TUNE_MODES)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("extract", help="embed whole recordings into a TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio-list", required=True, help="file with one WAV path per line")
    p.add_argument("--out", required=True)
    p.add_argument("--num-segments", type=int, default=None)
    _add_common(p)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("dfl", help="deep feature loss between two WAV files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wav_a")
    p.add_argument("wav_b")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=cmd_dfl)

    p = sub.add_parser("classify", help="fit or evaluate a logistic regression")
    csub = p.add_subparsers(dest="classify_command", required=True, parser_class=_Parser)

    pf = csub.add_parser("fit")
    pf.add_argument("--embeddings", required=True)
    pf.add_argument("--labels", required=True)
    pf.add_argument("--out", required=True)
    pf.add_argument("--l2", type=float, default=1e-4)
    pf.add_argument("--iters", type=int, default=500)
    pf.add_argument("--lr", type=float, default=0.1)
    _add_common(pf)
    pf.set_defaults(handler=cmd_classify_fit)

    pe = csub.add_parser("eval")
    pe.add_argument("--embeddings", required=True)
    pe.add_argument("--labels", required=True)
    pe.add_argument("--model", required=True)
    _add_common(pe)
    pe.set_defaults(handler=cmd_classify_eval)

    p = sub.add_parser("dream", help="activation-maximization visualization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", default=None, help="tap1..tap5 or blockN_convM")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write a PNG (needs Pillow)")
    _add_common(p)
    p.set_defaults(handler=cmd_dream)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - internal errors
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
