import numpy as np
import pytest

from speechvgg import (
    AugmentPolicy,
    DataError,
    DatasetManifest,
    ManifestEntry,
    ModelConfig,
    TrainConfig,
    WordAlignment,
    build,
    evaluate,
    fine_tune,
    train_word_classifier,
)
from speechvgg.synth import make_speaker_corpus, make_word_corpus
from speechvgg.train import norm_stats_for_manifest


def micro_model_config(num_classes=2):
    return ModelConfig(num_classes=num_classes, width_scale=0.0625, fc_dims=(16, 16))


def micro_train_config(**kw):
    defaults = dict(epochs=2, lr=1e-3, batch_size=8, seed=0, augment=None)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def micro_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_words")
    return make_word_corpus(
        out, num_classes=2, train_per_class=8, val_per_class=4, seed=5,
        min_dur=0.5, max_dur=0.7,
    )


@pytest.fixture(scope="module")
def micro_speakers(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_speakers")
    return make_speaker_corpus(
        out, num_speakers=2, train_per_speaker=6, val_per_speaker=3, seed=6,
        min_dur=0.5, max_dur=0.7,
    )


class TestTrainWordClassifier:
    def test_runs_and_logs(self, micro_corpus):
        train_m, val_m = micro_corpus
        model, metrics = train_word_classifier(
            train_m, val_m, micro_model_config(), micro_train_config()
        )
        assert len(metrics.steps) == 2 * 2  # 16 examples / batch 8, 2 epochs
        assert len(metrics.evals) == 2
        assert all(np.isfinite(loss) for _, _, loss in metrics.steps)
        assert model.norm_stats is not None
        assert model.dictionary_hash
        assert 0.0 <= metrics.final_val_acc() <= 1.0

    def test_deterministic_given_seed(self, micro_corpus):
        train_m, val_m = micro_corpus
        runs = []
        for _ in range(2):
            model, metrics = train_word_classifier(
                train_m, val_m, micro_model_config(), micro_train_config(seed=3)
            )
            runs.append((model.param_bytes(), metrics.core_fields()))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_worker_count_does_not_change_results(self, micro_corpus):
        train_m, val_m = micro_corpus
        config = micro_train_config(seed=9, augment=AugmentPolicy())
        serial, m1 = train_word_classifier(train_m, val_m, micro_model_config(), config)
        threaded, m2 = train_word_classifier(
            train_m, val_m, micro_model_config(), micro_train_config(seed=9, augment=AugmentPolicy(), workers=3)
        )
        assert serial.param_bytes() == threaded.param_bytes()
        assert m1.core_fields() == m2.core_fields()

    def test_loss_decreasing_trend(self, micro_corpus):
        train_m, val_m = micro_corpus
        config = micro_train_config(epochs=25, batch_size=2, lr=1e-3, seed=1)
        _, metrics = train_word_classifier(train_m, val_m, micro_model_config(), config)
        losses = [loss for _, _, loss in metrics.steps][:200]
        assert len(losses) == 200
        assert np.median(losses[-50:]) < np.median(losses[:50])

    def test_stats_from_train_manifest_only(self, micro_corpus):
        train_m, val_m = micro_corpus
        model, _ = train_word_classifier(
            train_m, val_m, micro_model_config(), micro_train_config()
        )
        expected = norm_stats_for_manifest(train_m)
        np.testing.assert_array_equal(model.norm_stats.mean, expected.mean)
        np.testing.assert_array_equal(model.norm_stats.std, expected.std)

    def test_empty_manifest_rejected(self, micro_corpus):
        _, val_m = micro_corpus
        with pytest.raises(DataError, match="empty manifest"):
            train_word_classifier(
                DatasetManifest([]), val_m, micro_model_config(), micro_train_config()
            )

    def test_dictionary_mismatch_rejected(self, micro_corpus):
        train_m, _ = micro_corpus
        flipped = DatasetManifest(
            [
                ManifestEntry(e.audio, e.alignment, 1 - e.label)
                for e in train_m.entries[:4]
            ]
        )
        with pytest.raises(DataError, match="dictionary mismatch"):
            train_word_classifier(train_m, flipped, micro_model_config(), micro_train_config())

    def test_eval_every_cadence(self, micro_corpus):
        train_m, val_m = micro_corpus
        config = micro_train_config(epochs=2, batch_size=4, eval_every=3)
        _, metrics = train_word_classifier(train_m, val_m, micro_model_config(), config)
        # 4 steps per epoch: mid-epoch evals at steps 3 and 6 plus one per epoch end
        mid_steps = [s for s, *_ in metrics.evals]
        assert 3 in mid_steps and 6 in mid_steps
        assert len(metrics.evals) == 2 + 2

    def test_metrics_csv(self, micro_corpus, tmp_path):
        train_m, val_m = micro_corpus
        _, metrics = train_word_classifier(
            train_m, val_m, micro_model_config(), micro_train_config()
        )
        path = tmp_path / "metrics.csv"
        metrics.save_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,epoch,loss,train_acc,val_acc,seconds"
        assert len(lines) == 1 + len(metrics.steps) + len(metrics.evals)


class TestEvaluate:
    def test_untrained_model_near_chance(self, micro_corpus):
        train_m, _ = micro_corpus
        # a 4-way untrained head over 2-class data still predicts ~uniformly
        model = build(micro_model_config(num_classes=4), seed=11)
        model.norm_stats = norm_stats_for_manifest(train_m)
        acc, confusion = evaluate(model, train_m)
        n = len(train_m.entries)
        assert confusion.sum() == n
        sigma = np.sqrt(0.25 * 0.75 / n)
        assert abs(acc - 0.25) <= 3 * sigma + 1e-9

    def test_class_overflow(self, micro_corpus):
        train_m, _ = micro_corpus
        model = build(micro_model_config(num_classes=2), seed=0)
        model.norm_stats = norm_stats_for_manifest(train_m)
        bad = DatasetManifest(
            [ManifestEntry(train_m.entries[0].audio, train_m.entries[0].alignment, 5)]
        )
        with pytest.raises(DataError, match="class overflow"):
            evaluate(model, bad)

    def test_empty_manifest(self):
        model = build(micro_model_config(), seed=0)
        with pytest.raises(DataError, match="empty"):
            evaluate(model, DatasetManifest([]))


@pytest.fixture(scope="module")
def base(micro_corpus):
    train_m, val_m = micro_corpus
    model, _ = train_word_classifier(
        train_m, val_m, micro_model_config(), micro_train_config(seed=2)
    )
    return model


class TestFineTune:
    def test_frozen_conv_bitwise_unchanged_every_step(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        conv_before = {p.name: p.value.tobytes() for p in base.conv_params()}

        def assert_frozen(model, step):
            for p in model.conv_params():
                assert p.value.tobytes() == conv_before[p.name], f"step {step}: {p.name}"

        model, _ = fine_tune(
            base, "frozen", train_m, val_m, micro_train_config(seed=4),
            step_callback=assert_frozen,
        )
        assert model.meta["fine_tune_mode"] == "frozen"
        for p in model.conv_params():
            assert p.value.tobytes() == conv_before[p.name]

    def test_fresh_reinitializes(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        model, _ = fine_tune(base, "fresh", train_m, val_m, micro_train_config(seed=4))
        base_conv = base.param_bytes()
        fresh_conv = model.param_bytes()
        assert all(fresh_conv[p.name] != base_conv[p.name] for p in model.conv_params())

    def test_finetune_changes_conv(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        model, _ = fine_tune(base, "finetune", train_m, val_m, micro_train_config(seed=4))
        base_conv = {p.name: p.value.tobytes() for p in base.conv_params()}
        changed = [p.name for p in model.conv_params() if p.value.tobytes() != base_conv[p.name]]
        assert changed

    def test_head_matches_new_classes(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        model, _ = fine_tune(base, "frozen", train_m, val_m, micro_train_config())
        assert model.config.num_classes == 2

    def test_invalid_mode(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        with pytest.raises(ValueError, match="invalid mode"):
            fine_tune(base, "warm", train_m, val_m, micro_train_config())

    def test_embedding_preserved_by_frozen(self, base, micro_speakers):
        train_m, val_m = micro_speakers
        model, _ = fine_tune(base, "frozen", train_m, val_m, micro_train_config())
        x = np.random.default_rng(0).standard_normal((1, 1, 128, 128)).astype(np.float32)
        np.testing.assert_array_equal(base.embed(x), model.embed(x))
