import numpy as np
import pytest

from speechvgg import (
    CheckpointError,
    ModelConfig,
    NormStats,
    build,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
    swap_head,
)

# Every parameter of the default full-scale architecture (1000 classes),
# written out longhand as the regression oracle for param_shapes().
FULL_SCALE_SHAPES = [
    ("block1_conv1.weight", (64, 1, 3, 3)), ("block1_conv1.bias", (64,)),
    ("block1_conv2.weight", (64, 64, 3, 3)), ("block1_conv2.bias", (64,)),
    ("block2_conv1.weight", (128, 64, 3, 3)), ("block2_conv1.bias", (128,)),
    ("block2_conv2.weight", (128, 128, 3, 3)), ("block2_conv2.bias", (128,)),
    ("block3_conv1.weight", (256, 128, 3, 3)), ("block3_conv1.bias", (256,)),
    ("block3_conv2.weight", (256, 256, 3, 3)), ("block3_conv2.bias", (256,)),
    ("block3_conv3.weight", (256, 256, 3, 3)), ("block3_conv3.bias", (256,)),
    ("block4_conv1.weight", (512, 256, 3, 3)), ("block4_conv1.bias", (512,)),
    ("block4_conv2.weight", (512, 512, 3, 3)), ("block4_conv2.bias", (512,)),
    ("block4_conv3.weight", (512, 512, 3, 3)), ("block4_conv3.bias", (512,)),
    ("block5_conv1.weight", (512, 512, 3, 3)), ("block5_conv1.bias", (512,)),
    ("block5_conv2.weight", (512, 512, 3, 3)), ("block5_conv2.bias", (512,)),
    ("block5_conv3.weight", (512, 512, 3, 3)), ("block5_conv3.bias", (512,)),
    ("fc1.weight", (4096, 8192)), ("fc1.bias", (4096,)),
    ("fc2.weight", (4096, 4096)), ("fc2.bias", (4096,)),
    ("head.weight", (1000, 4096)), ("head.bias", (1000,)),
]


def tiny_config(num_classes=4, width=0.0625, fc=(16, 16)):
    return ModelConfig(num_classes=num_classes, width_scale=width, fc_dims=fc)


class TestModelConfig:
    def test_default_conv_shapes(self):
        shapes = dict(ModelConfig(num_classes=1000).param_shapes())
        assert shapes["block1_conv1.weight"] == (64, 1, 3, 3)
        assert shapes["block5_conv3.weight"] == (512, 512, 3, 3)

    def test_full_scale_shape_table(self):
        assert ModelConfig(num_classes=1000).param_shapes() == FULL_SCALE_SHAPES

    def test_full_scale_param_count_regression(self):
        total = sum(int(np.prod(s)) for _, s in FULL_SCALE_SHAPES)
        assert total == 69_150_376
        assert ModelConfig(num_classes=1000).param_count() == 69_150_376

    def test_width_scaling(self):
        cfg = ModelConfig(num_classes=10, width_scale=0.25)
        assert cfg.scaled_channels() == (16, 32, 64, 128, 128)

    def test_embed_dims(self):
        assert ModelConfig(num_classes=10).embed_dim == 8192
        assert ModelConfig(num_classes=10, width_scale=0.25).embed_dim == 2048

    def test_tap_spatial_sizes(self):
        cfg = ModelConfig(num_classes=10)
        assert cfg.tap_spatial_sizes() == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            ModelConfig(num_classes=1)
        with pytest.raises(ValueError):
            ModelConfig(num_classes=10, block_convs=(2, 2, 3, 3))
        with pytest.raises(ValueError):
            ModelConfig(num_classes=10, fc_dims=(64,))
        with pytest.raises(ValueError):
            ModelConfig(num_classes=10, input_shape=(100, 128))

    def test_round_trip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_tap_spatial_chain(self, tiny_model):
        x = np.random.default_rng(0).standard_normal((1, 1, 128, 128)).astype(np.float32)
        logits, taps = tiny_model.forward_with_taps(x)
        assert [t.shape[2] for t in taps] == [64, 32, 16, 8, 4]
        assert [t.shape[3] for t in taps] == [64, 32, 16, 8, 4]
        assert logits.shape == (1, 4)

    def test_zero_input_finite(self, tiny_model):
        logits, taps = tiny_model.forward_with_taps(np.zeros((1, 1, 128, 128), np.float32))
        assert np.isfinite(logits).all()

    def test_duplicate_rows_identical(self, tiny_model):
        x = np.random.default_rng(1).standard_normal((1, 1, 128, 128)).astype(np.float32)
        batch = np.concatenate([x, x])
        logits, _ = tiny_model.forward_with_taps(batch)
        assert logits[0].tobytes() == logits[1].tobytes()

    def test_input_shape_checked(self, tiny_model):
        with pytest.raises(ValueError, match="shape"):
            tiny_model.forward_with_taps(np.zeros((1, 1, 64, 64), np.float32))

    def test_embed_is_flattened_last_tap(self, tiny_model):
        x = np.random.default_rng(2).standard_normal((1, 1, 128, 128)).astype(np.float32)
        _, taps = tiny_model.forward_with_taps(x)
        emb = tiny_model.embed(x)
        assert emb.shape == (tiny_model.config.embed_dim,)
        np.testing.assert_array_equal(emb, taps[-1].reshape(-1))

    def test_build_deterministic(self):
        a = build(tiny_config(), seed=3)
        b = build(tiny_config(), seed=3)
        assert a.param_bytes() == b.param_bytes()
        c = build(tiny_config(), seed=4)
        assert a.param_bytes() != c.param_bytes()


class TestSwapHeadAndTrainability:
    def test_swap_keeps_conv_bit_identical(self):
        model = build(ModelConfig(num_classes=3000, width_scale=0.0625, fc_dims=(32, 32)), seed=0)
        swapped = swap_head(model, 630, seed=1)
        assert swapped.config.num_classes == 630
        old = {p.name: p.value.tobytes() for p in model.conv_params()}
        new = {p.name: p.value.tobytes() for p in swapped.conv_params()}
        assert old == new

    def test_swap_redraws_head(self, tiny_model):
        swapped = swap_head(tiny_model, tiny_model.config.num_classes, seed=99)
        for old, new in zip(tiny_model.head_params(), swapped.head_params()):
            if old.value.size:
                assert old.value.tobytes() != new.value.tobytes() or old.value.sum() == 0

    def test_embed_invariant_under_swap(self, tiny_model):
        x = np.random.default_rng(5).standard_normal((1, 1, 128, 128)).astype(np.float32)
        before = tiny_model.embed(x)
        swapped = swap_head(tiny_model, 11, seed=2)
        np.testing.assert_array_equal(before, swapped.embed(x))

    def test_swap_rejects_tiny_head(self, tiny_model):
        with pytest.raises(ValueError):
            swap_head(tiny_model, 1, seed=0)

    def test_trainable_modes(self, tiny_model):
        set_trainable(tiny_model, "head_only")
        assert all(not p.trainable for p in tiny_model.conv_params())
        assert all(p.trainable for p in tiny_model.head_params())
        set_trainable(tiny_model, "none")
        assert all(not p.trainable for p in tiny_model.params())
        set_trainable(tiny_model, "all")
        assert all(p.trainable for p in tiny_model.params())
        with pytest.raises(ValueError, match="mode"):
            set_trainable(tiny_model, "some")

    def test_embed_invariant_under_trainability(self, tiny_model):
        x = np.random.default_rng(6).standard_normal((1, 1, 128, 128)).astype(np.float32)
        before = tiny_model.embed(x)
        set_trainable(tiny_model, "none")
        np.testing.assert_array_equal(before, tiny_model.embed(x))


class TestCheckpoint:
    def model_with_extras(self):
        model = build(tiny_config(), seed=8)
        model.norm_stats = NormStats(np.linspace(-1, 1, 128), np.linspace(0.5, 2, 128))
        model.dictionary_hash = "abc123"
        model.meta = {"epochs": 3, "best_val_acc": 0.5}
        return model

    def test_round_trip_bitwise(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.param_bytes() == model.param_bytes()
        assert back.config == model.config
        np.testing.assert_array_equal(back.norm_stats.mean, model.norm_stats.mean)
        assert back.dictionary_hash == "abc123"
        assert back.meta["epochs"] == 3

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = self.model_with_extras()
        p1, p2 = tmp_path / "a.svgg", tmp_path / "b.svgg"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupted_blob_named(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        # flip one byte inside the first weight blob's data region
        marker = raw.find(b"block1_conv1.weight") + len(b"block1_conv1.weight") + 1 + 8 * 4
        raw[marker + 10] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="block1_conv1.weight"):
            load_checkpoint(path)

    def test_config_blob_shape_mismatch(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        # shrink the declared head width in the JSON header only
        patched = raw.replace(b'"fc_dims": [16, 16]', b'"fc_dims": [16, 12]', 1)
        assert patched != raw
        (tmp_path / "bad.svgg").write_bytes(patched)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(tmp_path / "bad.svgg")

    def test_version_mismatch(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.svgg"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_missing_blob(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        # truncate cleanly before the final blob (head.bias)
        cut = raw.rfind(b"\x09\x00head.bias") if b"\x09\x00head.bias" in raw else raw.rfind(b"head.bias") - 2
        (tmp_path / "cut.svgg").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="head.bias"):
            load_checkpoint(tmp_path / "cut.svgg")

    def test_truncated_mid_blob(self, tmp_path):
        model = self.model_with_extras()
        path = tmp_path / "m.svgg"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        (tmp_path / "cut.svgg").write_bytes(raw[: len(raw) - 7])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.svgg")
