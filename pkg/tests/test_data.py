import numpy as np
import pytest

from speechvgg import (
    AudioBuffer,
    DataError,
    DatasetManifest,
    ManifestEntry,
    WordAlignment,
    build_dictionary,
    extract_segment,
    make_batches,
    pad_to_canvas,
    parse_alignments,
)
from speechvgg.data import place_centered
from speechvgg.dsp import LogMagSpectrogram


def align(word, n=1, utt="u"):
    return [WordAlignment(utt, word, 0, 100) for _ in range(n)]


def normspec(values):
    return LogMagSpectrogram(np.asarray(values, dtype=np.float64), normalized=True)


class TestParseAlignments:
    HEADER = "utterance_id,word,start_sample,end_sample\n"

    def test_basic_line(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(self.HEADER + "utt1,Water,16000,24000\n")
        records = parse_alignments(path)
        assert records == [WordAlignment("utt1", "water", 16000, 24000)]

    def test_start_equal_end_reports_line(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(self.HEADER + "utt1,water,100,200\nutt2,fire,300,300\n")
        with pytest.raises(DataError, match="line 3"):
            parse_alignments(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("")
        assert parse_alignments(path) == []

    def test_header_only(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(self.HEADER)
        assert parse_alignments(path) == []

    def test_bad_column_count(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(self.HEADER + "utt1,water,1\n")
        with pytest.raises(DataError, match="line 2"):
            parse_alignments(path)

    def test_non_integer_samples(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(self.HEADER + "utt1,water,x,200\n")
        with pytest.raises(DataError, match="integers"):
            parse_alignments(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("utt1,water,100,200\n")
        with pytest.raises(DataError, match="header"):
            parse_alignments(path)


class TestBuildDictionary:
    def test_frequency_ranking_with_length_filter(self):
        alignments = align("the", 10) + align("water", 3) + align("going", 2)
        d = build_dictionary(alignments, size=2, min_word_len=4)
        assert d.word_to_class == {"water": 0, "going": 1}

    def test_lexicographic_tie_break(self):
        alignments = align("bravo", 2) + align("apple", 2)
        d = build_dictionary(alignments, size=2)
        assert d.word_to_class == {"apple": 0, "bravo": 1}

    def test_not_enough_words(self):
        alignments = align("water", 5) + align("going", 1) + align("tree", 1)
        with pytest.raises(DataError, match="need 5"):
            build_dictionary(alignments, size=5)

    def test_short_words_always_excluded(self):
        rng = np.random.default_rng(0)
        letters = "abcdefghij"
        words = [
            "".join(rng.choice(list(letters), size=rng.integers(1, 8)))
            for _ in range(300)
        ]
        alignments = [WordAlignment("u", w, 0, 10) for w in words]
        qualifying = {w for w in words if len(w) >= 4}
        if len(qualifying) < 5:
            pytest.skip("degenerate draw")
        d = build_dictionary(alignments, size=5, min_word_len=4)
        assert all(len(w) >= 4 for w in d.word_to_class)
        assert sorted(d.word_to_class.values()) == list(range(5))

    def test_save_load(self, tmp_path):
        d = build_dictionary(align("water", 2) + align("going", 1), size=2)
        d.save(tmp_path / "d.json")
        back = type(d).load(tmp_path / "d.json")
        assert back.word_to_class == d.word_to_class
        assert back.content_hash() == d.content_hash()


class TestExtractSegment:
    def test_copies_range(self):
        audio = AudioBuffer(np.arange(32000, dtype=np.float64) / 32000)
        seg = extract_segment(audio, WordAlignment("u", "word", 16000, 24000))
        assert len(seg) == 8000
        np.testing.assert_array_equal(seg.samples, audio.samples[16000:24000])

    def test_out_of_range(self):
        audio = AudioBuffer(np.ones(100) * 0.1)
        with pytest.raises(DataError, match="exceeds"):
            extract_segment(audio, WordAlignment("u", "word", 50, 101))

    def test_full_buffer_identity(self):
        audio = AudioBuffer(np.linspace(-0.5, 0.5, 256))
        seg = extract_segment(audio, WordAlignment("u", "word", 0, 256))
        np.testing.assert_array_equal(seg.samples, audio.samples)


class TestPadToCanvas:
    def test_shorter_input_padded(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(128, 100))
        canvas, (foff, toff) = pad_to_canvas(normspec(values), np.random.default_rng(1))
        assert canvas.shape == (128, 128)
        assert foff == 0
        np.testing.assert_array_equal(canvas[:, toff : toff + 100], values)
        outside = np.delete(canvas, np.s_[toff : toff + 100], axis=1)
        assert outside.shape == (128, 28)
        assert np.count_nonzero(outside) == 0

    def test_exact_fit_identity(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(128, 128))
        canvas, (_, toff) = pad_to_canvas(normspec(values), np.random.default_rng(3))
        assert toff == 0
        np.testing.assert_array_equal(canvas, values)

    def test_long_input_cropped_contiguously(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(128, 200))
        canvas, _ = pad_to_canvas(normspec(values), np.random.default_rng(5))
        # the canvas must match the source at exactly one sliding offset
        matches = [
            s for s in range(200 - 128 + 1) if np.array_equal(canvas, values[:, s : s + 128])
        ]
        assert len(matches) == 1

    def test_offsets_cover_range(self):
        values = np.zeros((128, 100))
        offsets = {
            pad_to_canvas(normspec(values), np.random.default_rng(s))[1][1]
            for s in range(200)
        }
        assert min(offsets) == 0
        assert max(offsets) == 28
        assert all(0 <= o <= 28 for o in offsets)

    def test_wrong_bins_rejected(self):
        with pytest.raises(ValueError, match="frequency bins"):
            pad_to_canvas(normspec(np.zeros((64, 10))), np.random.default_rng(0))

    def test_unnormalized_rejected(self):
        spec = LogMagSpectrogram(np.zeros((128, 10)), normalized=False)
        with pytest.raises(ValueError, match="normalized"):
            pad_to_canvas(spec, np.random.default_rng(0))

    def test_centered_placement(self):
        values = np.ones((128, 100))
        canvas, (_, toff) = place_centered(normspec(values))
        assert toff == 14
        np.testing.assert_array_equal(canvas[:, 14:114], values)
        canvas_long, _ = place_centered(normspec(np.arange(128 * 200).reshape(128, 200) * 1.0))
        assert canvas_long.shape == (128, 128)


class TestManifest:
    def entries(self, n, num_classes=3):
        return [
            ManifestEntry(f"a{i}.wav", WordAlignment(f"u{i}", f"word{i % num_classes}", 0, 10), i % num_classes)
            for i in range(n)
        ]

    def test_round_trip(self, tmp_path):
        manifest = DatasetManifest(self.entries(7))
        manifest.save(tmp_path / "m.jsonl")
        back = DatasetManifest.load(tmp_path / "m.jsonl")
        assert back.entries == manifest.entries
        assert back.num_classes == 3

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"audio": "a.wav"}\n')
        with pytest.raises(DataError, match="line 1"):
            DatasetManifest.load(path)

    def test_word_class_conflict(self):
        entries = [
            ManifestEntry("a.wav", WordAlignment("u1", "water", 0, 10), 0),
            ManifestEntry("b.wav", WordAlignment("u2", "water", 0, 10), 1),
        ]
        with pytest.raises(DataError, match="water"):
            DatasetManifest(entries).word_class_map()


class TestMakeBatches:
    def manifest(self, n, seed=0):
        entries = [
            ManifestEntry(f"a{i}.wav", WordAlignment(f"u{i}", "word", 0, 10), 0)
            for i in range(n)
        ]
        return DatasetManifest(entries, seed=seed)

    def test_batch_sizes(self):
        batches = make_batches(self.manifest(10), batch_size=4, epoch=0)
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_partition_exact(self):
        for n, bs in ((10, 4), (64, 64), (7, 1), (100, 9)):
            batches = make_batches(self.manifest(n), batch_size=bs, epoch=3)
            flat = sorted(i for b in batches for i in b)
            assert flat == list(range(n))

    def test_deterministic_per_seed_epoch(self):
        a = make_batches(self.manifest(50, seed=9), batch_size=8, epoch=2)
        b = make_batches(self.manifest(50, seed=9), batch_size=8, epoch=2)
        assert a == b

    def test_epochs_differ(self):
        a = make_batches(self.manifest(120), batch_size=120, epoch=0)[0]
        b = make_batches(self.manifest(120), batch_size=120, epoch=1)[0]
        assert a != b

    def test_empty_manifest(self):
        with pytest.raises(DataError, match="empty manifest"):
            make_batches(DatasetManifest([]), batch_size=4, epoch=0)
