"""The speechVGG extractor: five conv blocks, pooling taps, head, checkpoints.

A model is a fixed chain of conv/ReLU/pool layers (five blocks) followed
by two fully-connected layers and a linear output layer; softmax is
fused into the loss. The max-pool output concluding each block (a
"tap") is the unit of feature readout, and the flattened last tap is
the embedding.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dsp import NormStats
from .errors import CheckpointError
from .nn import Conv3x3, Dense, Flatten, MaxPool2x2, Param, ReLU
from .seeding import rng_for

NUM_BLOCKS = 5

CHECKPOINT_MAGIC = b"SVGG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    block_convs: tuple = (2, 2, 3, 3, 3)
    block_channels: tuple = (64, 128, 256, 512, 512)
    fc_dims: tuple = (4096, 4096)
    input_shape: tuple = (128, 128)
    width_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "block_convs", tuple(int(v) for v in self.block_convs))
        object.__setattr__(
            self, "block_channels", tuple(int(v) for v in self.block_channels)
        )
        object.__setattr__(self, "fc_dims", tuple(int(v) for v in self.fc_dims))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.block_convs) != NUM_BLOCKS or len(self.block_channels) != NUM_BLOCKS:
            raise ValueError(f"exactly {NUM_BLOCKS} blocks required")
        if len(self.fc_dims) != 2:
            raise ValueError("fc_dims must hold exactly two widths")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(v < 1 for v in self.block_convs) or any(v < 1 for v in self.fc_dims):
            raise ValueError("layer counts and widths must be >= 1")
        h, w = self.input_shape
        if h % (1 << NUM_BLOCKS) or w % (1 << NUM_BLOCKS):
            raise ValueError(f"input dims must be divisible by {1 << NUM_BLOCKS}")
        if any(c < 1 for c in self.scaled_channels()):
            raise ValueError("width_scale leaves a block without channels")

    def scaled_channels(self) -> tuple:
        return tuple(max(1, int(round(c * self.width_scale))) for c in self.block_channels)

    def tap_spatial_sizes(self) -> list:
        h, w = self.input_shape
        return [(h >> (i + 1), w >> (i + 1)) for i in range(NUM_BLOCKS)]

    @property
    def embed_dim(self) -> int:
        h, w = self.tap_spatial_sizes()[-1]
        return h * w * self.scaled_channels()[-1]

    def param_shapes(self) -> list:
        """(name, shape) for every parameter, in chain order. Pure arithmetic."""
        shapes = []
        in_ch = 1
        for b, (n_convs, out_ch) in enumerate(zip(self.block_convs, self.scaled_channels())):
            for j in range(n_convs):
                name = f"block{b + 1}_conv{j + 1}"
                shapes.append((f"{name}.weight", (out_ch, in_ch, 3, 3)))
                shapes.append((f"{name}.bias", (out_ch,)))
                in_ch = out_ch
        dims = [self.embed_dim, *self.fc_dims, self.num_classes]
        for name, (d_in, d_out) in zip(("fc1", "fc2", "head"), zip(dims, dims[1:])):
            shapes.append((f"{name}.weight", (d_out, d_in)))
            shapes.append((f"{name}.bias", (d_out,)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_shapes())

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "block_convs": list(self.block_convs),
            "block_channels": list(self.block_channels),
            "fc_dims": list(self.fc_dims),
            "input_shape": list(self.input_shape),
            "width_scale": self.width_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            block_convs=tuple(d["block_convs"]),
            block_channels=tuple(d["block_channels"]),
            fc_dims=tuple(d["fc_dims"]),
            input_shape=tuple(d["input_shape"]),
            width_scale=float(d["width_scale"]),
        )


class SpeechVGG:
    """Five-block convolutional extractor with pooling taps and a softmax head."""

    def __init__(self, config: ModelConfig, conv_rng=None, head_rng=None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.norm_stats: NormStats | None = None
        self.dictionary_hash: str | None = None
        self.meta: dict = {}

        self.conv_layers = []
        self.pool_indices = []
        in_ch = 1
        for b, (n_convs, out_ch) in enumerate(
            zip(config.block_convs, config.scaled_channels())
        ):
            for j in range(n_convs):
                self.conv_layers.append(
                    Conv3x3(f"block{b + 1}_conv{j + 1}", in_ch, out_ch, conv_rng, dtype)
                )
                self.conv_layers.append(ReLU())
                in_ch = out_ch
            self.conv_layers.append(MaxPool2x2())
            self.pool_indices.append(len(self.conv_layers) - 1)

        dims = [config.embed_dim, *config.fc_dims]
        self.head_layers = [Flatten()]
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:]), start=1):
            self.head_layers.append(Dense(f"fc{i}", d_in, d_out, head_rng, dtype))
            self.head_layers.append(ReLU())
        self.head_layers.append(Dense("head", dims[-1], config.num_classes, head_rng, dtype))

    # -- parameter access ---------------------------------------------------

    def conv_params(self) -> list:
        return [p for layer in self.conv_layers for p in layer.params()]

    def head_params(self) -> list:
        return [p for layer in self.head_layers for p in layer.params()]

    def params(self) -> list:
        return self.conv_params() + self.head_params()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def param_bytes(self) -> dict:
        """name -> raw little-endian float32 bytes, for bitwise comparisons."""
        return {p.name: p.value.astype("<f4").tobytes() for p in self.params()}

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        h, w = self.config.input_shape
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (1, h, w):
            raise ValueError(f"expected input of shape (B, 1, {h}, {w}), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward_convs(self, x: np.ndarray, cache: bool = False) -> list:
        """Run the five conv blocks; returns the five pooling-tap activations."""
        x = self._check_input(x)
        taps = []
        for i, layer in enumerate(self.conv_layers):
            x = layer.forward(x, cache=cache)
            if i in self.pool_indices:
                taps.append(x)
        return taps

    def forward_with_taps(self, x: np.ndarray, cache: bool = False):
        """(logits, taps) for a batch. Logits are pre-softmax."""
        taps = self.forward_convs(x, cache=cache)
        h = taps[-1]
        for layer in self.head_layers:
            h = layer.forward(h, cache=cache)
        return h, taps

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        """Row-major flattening of the last pooling tap, per batch row."""
        taps = self.forward_convs(x, cache=False)
        out = taps[-1]
        return out.reshape(out.shape[0], -1)

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Embedding vector for a single example (1,1,H,W) or (H,W)."""
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None, None]
        if x.shape[0] != 1:
            raise ValueError("embed takes a single example; use embed_batch")
        return self.embed_batch(x)[0]

    def _lowest_trainable(self, chain) -> int:
        for i, layer in enumerate(chain):
            if any(p.trainable for p in layer.params()):
                return i
        return len(chain)

    def backward(self, grad_logits: np.ndarray, need_input_grad: bool = False):
        """Backpropagate from the logits; stops below the lowest trainable layer.

        Parameter gradients land in each Param's ``grad``; the input
        gradient is returned only when requested.
        """
        chain = self.conv_layers + self.head_layers
        lowest = 0 if need_input_grad else self._lowest_trainable(chain)
        g = grad_logits
        for i in range(len(chain) - 1, -1, -1):
            if i < lowest:
                return None
            layer = chain[i]
            g = layer.backward(
                g,
                need_input_grad=need_input_grad or i > lowest,
                need_param_grads=any(p.trainable for p in layer.params()),
            )
            if g is None and i > lowest:
                return None
        return g

    def backward_convs(self, tap_grads: list) -> np.ndarray:
        """Input gradient from gradients injected at the pooling taps.

        ``tap_grads[i]`` is the upstream gradient at block i+1's pool
        output (None to skip a tap). Parameter gradients are not
        computed; the model is read-only here.
        """
        inject = {pi: tap_grads[rank] for rank, pi in enumerate(self.pool_indices)}
        top = max(i for i in inject if inject[i] is not None)
        g = None
        for i in range(top, -1, -1):
            layer = self.conv_layers[i]
            if inject.get(i) is not None:
                g = inject[i] if g is None else g + inject[i]
            g = layer.backward(g, need_input_grad=True, need_param_grads=False)
        return g

    # -- dream support: partial forward/backward over the conv chain --------

    def resolve_layer(self, ref: str) -> int:
        """Index in the conv chain for 'tapN' or 'blockN_convM' references."""
        if ref.startswith("tap"):
            try:
                n = int(ref[3:])
            except ValueError:
                n = -1
            if not 1 <= n <= NUM_BLOCKS:
                raise ValueError(f"unknown layer {ref!r}: taps are tap1..tap{NUM_BLOCKS}")
            return self.pool_indices[n - 1]
        for i, layer in enumerate(self.conv_layers):
            if isinstance(layer, Conv3x3) and layer.weight.name == f"{ref}.weight":
                return i
        raise ValueError(f"unknown layer {ref!r}")

    def forward_to(self, x: np.ndarray, layer_index: int, cache: bool = False) -> np.ndarray:
        """Activation at conv-chain position ``layer_index`` (inclusive)."""
        x = self._check_input(x)
        for i in range(layer_index + 1):
            x = self.conv_layers[i].forward(x, cache=cache)
        return x

    def backward_from(self, layer_index: int, grad: np.ndarray) -> np.ndarray:
        """Input gradient of an objective whose gradient at ``layer_index`` is given."""
        g = grad
        for i in range(layer_index, -1, -1):
            g = self.conv_layers[i].backward(g, need_input_grad=True, need_param_grads=False)
        return g


def build(config: ModelConfig, seed: int, dtype=np.float32) -> SpeechVGG:
    """Deterministic seeded construction; conv and head draw from separate streams."""
    return SpeechVGG(
        config,
        conv_rng=rng_for(seed, "init", "conv"),
        head_rng=rng_for(seed, "init", "head"),
        dtype=dtype,
    )


def swap_head(model: SpeechVGG, new_num_classes: int, seed: int) -> SpeechVGG:
    """New model with re-initialized dense/output layers at the new class count.

    Conv parameters are copied bit-for-bit; normalization stats and
    provenance metadata carry over.
    """
    if new_num_classes < 2:
        raise ValueError("new_num_classes must be >= 2")
    config = replace(model.config, num_classes=new_num_classes)
    out = SpeechVGG(config, conv_rng=None, head_rng=rng_for(seed, "init", "head"), dtype=model.dtype)
    for dst, src in zip(out.conv_params(), model.conv_params()):
        dst.value = src.value.copy()
    out.norm_stats = model.norm_stats
    out.dictionary_hash = model.dictionary_hash
    out.meta = dict(model.meta)
    return out


TRAINABLE_MODES = ("all", "head_only", "none")


def set_trainable(model: SpeechVGG, mode: str) -> SpeechVGG:
    """Set per-parameter trainability: 'all', 'head_only' or 'none'."""
    if mode not in TRAINABLE_MODES:
        raise ValueError(f"unknown trainability mode {mode!r}; expected {TRAINABLE_MODES}")
    for p in model.conv_params():
        p.trainable = mode == "all"
    for p in model.head_params():
        p.trainable = mode in ("all", "head_only")
    return model


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, named CRC-checked f32 blobs
# ---------------------------------------------------------------------------


def save_checkpoint(model: SpeechVGG, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats else None,
        "dictionary_hash": model.dictionary_hash,
        "training_meta": model.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for p in model.params():
            name = p.name.encode("utf-8")
            data = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
            fh.write(data)
            fh.write(struct.pack("<I", zlib.crc32(data)))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> SpeechVGG:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: malformed header JSON ({exc})") from exc
        try:
            config = ModelConfig.from_dict(header["model_config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: invalid model config in header ({exc})") from exc

        expected = dict(config.param_shapes())
        blobs = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointError("truncated checkpoint while reading blob name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "blob name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of '{name}'"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of '{name}'"))
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected blob '{name}'")
            if name in blobs:
                raise CheckpointError(f"{path}: duplicate blob '{name}'")
            if tuple(shape) != tuple(expected[name]):
                raise CheckpointError(
                    f"{path}: blob '{name}' has shape {tuple(shape)}, "
                    f"config implies {tuple(expected[name])}"
                )
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = _read_exact(fh, 4 * count, f"data of '{name}'")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, f"checksum of '{name}'"))
            if zlib.crc32(data) != crc:
                raise CheckpointError(f"{path}: checksum mismatch in blob '{name}'")
            blobs[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()

        missing = sorted(set(expected) - set(blobs))
        if missing:
            raise CheckpointError(f"{path}: missing blob(s): {', '.join(missing)}")

    model = SpeechVGG(config, conv_rng=None, head_rng=None, dtype=np.float32)
    for p in model.params():
        p.value = blobs[p.name]
    if header.get("norm_stats"):
        model.norm_stats = NormStats.from_dict(header["norm_stats"])
    model.dictionary_hash = header.get("dictionary_hash")
    model.meta = header.get("training_meta") or {}
    return model
