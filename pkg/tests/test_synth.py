import numpy as np

from speechvgg import load_wav
from speechvgg.synth import make_category_corpus, make_speaker_corpus, make_word_corpus


class TestWordCorpus:
    def test_shapes_and_labels(self, tmp_path):
        train_m, val_m = make_word_corpus(
            tmp_path, num_classes=3, train_per_class=2, val_per_class=1, seed=0
        )
        assert len(train_m.entries) == 6
        assert len(val_m.entries) == 3
        assert train_m.num_classes == 3
        for e in train_m.entries:
            audio = load_wav(e.audio)
            assert 0.5 * 16000 <= len(audio) <= 1.0 * 16000
            assert e.alignment.end_sample == len(audio)

    def test_deterministic(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        make_word_corpus(a_dir, num_classes=2, train_per_class=2, val_per_class=1, seed=9)
        make_word_corpus(b_dir, num_classes=2, train_per_class=2, val_per_class=1, seed=9)
        for name in sorted(p.name for p in a_dir.glob("*.wav")):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_manifests_on_disk(self, tmp_path):
        make_word_corpus(tmp_path, num_classes=2, train_per_class=2, val_per_class=1, seed=1)
        assert (tmp_path / "train_manifest.jsonl").exists()
        assert (tmp_path / "val_manifest.jsonl").exists()


class TestSpeakerCorpus:
    def test_speakers_share_words(self, tmp_path):
        train_m, _ = make_speaker_corpus(
            tmp_path, num_speakers=3, train_per_speaker=6, val_per_speaker=2, seed=0
        )
        words = {e.alignment.word for e in train_m.entries}
        labels = {e.label for e in train_m.entries}
        assert labels == {0, 1, 2}
        assert len(words) > 1  # word identity varies within speakers


class TestCategoryCorpus:
    def test_recordings_long_enough(self, tmp_path):
        train_items, test_items = make_category_corpus(
            tmp_path, train_per_class=1, test_per_class=1, seed=0, min_dur=1.2, max_dur=1.5
        )
        assert len(train_items) == 3 and len(test_items) == 3
        for path, rec_id, label in train_items + test_items:
            audio = load_wav(path)
            assert len(audio) >= 16384
            assert 0 <= label <= 2
        labels = (tmp_path / "train_labels.csv").read_text().splitlines()
        assert labels[0] == "recording_id,label"
        assert len(labels) == 4
