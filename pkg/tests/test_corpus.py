"""
Unit tests for toy corpus generation and corpus loading.
"""

import numpy as np
import pytest

from src.corpus import (
    LABELS_FILE,
    LoadedCorpus,
    TaskSpec,
    ToyCorpusSpec,
    balanced_labels,
    from_toy_corpus,
    generate_toy_corpus,
    load_corpus,
    parse_task_list,
    read_labels,
    write_toy_corpus,
)
from src.errors import ConfigError, InvalidInputError
from src.frontend import FrontendConfig

SMALL = ToyCorpusSpec(n_clips=8, duration_s=0.5, n_noise_clips=2, noise_duration_s=0.5, seed=3)


class TestParseTaskList:
    """Tests for parse_task_list function."""

    def test_counts_and_defaults(self):
        """Test explicit and default class counts."""
        assert parse_task_list("pitch:4,timbre") == (TaskSpec("pitch", 4), TaskSpec("timbre", 3))

    def test_empty_entries_skipped(self):
        """Test stray commas are ignored."""
        assert parse_task_list("emotion:2,") == (TaskSpec("emotion", 2),)

    def test_invalid(self):
        """Test unknown tasks, bad counts and duplicates are rejected."""
        for text in ("speaker:2", "pitch:x", "pitch:9", "pitch:1", "pitch,pitch:3"):
            with pytest.raises(ConfigError):
                parse_task_list(text)


class TestToyCorpusSpec:
    """Tests for ToyCorpusSpec validation."""

    def test_too_few_clips(self):
        """Test every class needs at least one clip."""
        with pytest.raises(ConfigError):
            ToyCorpusSpec(n_clips=2, tasks=(TaskSpec("timbre", 3),))

    def test_no_tasks(self):
        """Test an empty task list is rejected."""
        with pytest.raises(ConfigError):
            ToyCorpusSpec(tasks=())


class TestBalancedLabels:
    """Tests for balanced_labels function."""

    def test_balanced(self):
        """Test class counts differ by at most one."""
        labels = balanced_labels(10, 3, np.random.default_rng(0))
        assert sorted(np.bincount(labels).tolist()) == [3, 3, 4]


class TestGenerateToyCorpus:
    """Tests for generate_toy_corpus function."""

    def test_deterministic(self):
        """Test the same spec gives identical waveforms and labels."""
        a = generate_toy_corpus(SMALL)
        b = generate_toy_corpus(SMALL)
        assert all(np.array_equal(x, y) for x, y in zip(a.speech, b.speech))
        assert all(np.array_equal(x, y) for x, y in zip(a.noise, b.noise))
        assert all(np.array_equal(a.labels[t], b.labels[t]) for t in a.labels)

    def test_seed_changes_output(self):
        """Test another seed gives other waveforms."""
        a = generate_toy_corpus(SMALL)
        b = generate_toy_corpus(ToyCorpusSpec(n_clips=8, duration_s=0.5, n_noise_clips=2, noise_duration_s=0.5, seed=4))
        assert not np.array_equal(a.speech[0], b.speech[0])

    def test_shapes(self):
        """Test ids, lengths, labels and amplitude range."""
        corpus = generate_toy_corpus(SMALL)
        assert corpus.clip_ids[:2] == ["clip_0000", "clip_0001"]
        assert corpus.noise_ids == ["noise_0000", "noise_0001"]
        assert all(len(w) == 8000 for w in corpus.speech + corpus.noise)
        assert set(corpus.labels) == {"pitch", "timbre", "emotion"}
        assert np.bincount(corpus.labels["pitch"]).tolist() == [4, 4]
        assert all(np.abs(w).max() < 1.0 for w in corpus.speech + corpus.noise)

    def test_noise_level(self):
        """Test noise clips have RMS close to 0.1."""
        corpus = generate_toy_corpus(SMALL)
        for wave in corpus.noise:
            assert np.sqrt(np.mean(wave.astype(np.float64) ** 2)) == pytest.approx(0.1, rel=0.05)

    def test_pitch_classes_separable(self):
        """Test the strongest mel bin separates the two pitch classes."""
        spec = ToyCorpusSpec(n_clips=16, duration_s=0.5, tasks=(TaskSpec("pitch", 2),), n_noise_clips=1)
        corpus = from_toy_corpus(generate_toy_corpus(spec))
        peaks = np.array([int(np.exp(s.values.numpy()).mean(axis=1).argmax()) for s in corpus.speech])
        labels = corpus.labels["pitch"]
        assert peaks[labels == 0].max() < peaks[labels == 1].min()


class TestCorpusFiles:
    """Tests for write_toy_corpus, read_labels and load_corpus."""

    def test_roundtrip(self, tmp_path):
        """Test a written corpus loads with aligned labels and spectrograms."""
        toy = generate_toy_corpus(SMALL)
        write_toy_corpus(toy, tmp_path / "corpus")
        loaded = load_corpus(tmp_path / "corpus", max_workers=2)
        assert loaded.name == "corpus"
        assert loaded.clip_ids == toy.clip_ids
        assert loaded.noise_ids == toy.noise_ids
        assert all(np.array_equal(loaded.labels[t], toy.labels[t]) for t in toy.labels)
        assert all(s.values.shape == (80, 50) for s in loaded.speech)

    def test_labels_header(self, tmp_path):
        """Test labels.csv lists clip_id then every task."""
        write_toy_corpus(generate_toy_corpus(SMALL), tmp_path)
        header = (tmp_path / LABELS_FILE).read_text().splitlines()[0]
        assert header == "clip_id,pitch,timbre,emotion"

    def test_missing_label_row(self, tmp_path):
        """Test a clip without a label row is rejected."""
        path = tmp_path / LABELS_FILE
        path.write_text("clip_id,pitch\nclip_0000,1\n")
        assert read_labels(path, ["clip_0000"])["pitch"].tolist() == [1]
        with pytest.raises(InvalidInputError):
            read_labels(path, ["clip_0000", "clip_0001"])

    def test_missing_directory(self, tmp_path):
        """Test a corpus without speech/ is rejected."""
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nowhere")

    def test_empty_speech(self, tmp_path):
        """Test an empty speech folder is rejected."""
        (tmp_path / "speech").mkdir()
        with pytest.raises(InvalidInputError):
            load_corpus(tmp_path)

    def test_sample_rate_mismatch(self):
        """Test in-memory corpora must match the frontend rate."""
        with pytest.raises(InvalidInputError):
            from_toy_corpus(generate_toy_corpus(SMALL), FrontendConfig(sample_rate=8000, fmax=4000.0))


class TestLoadedCorpus:
    """Tests for LoadedCorpus validation."""

    def test_misaligned_labels(self, corpus):
        """Test label arrays must cover every clip."""
        with pytest.raises(InvalidInputError):
            LoadedCorpus(
                name="bad",
                clip_ids=corpus.clip_ids,
                speech=corpus.speech,
                noise_ids=[],
                noise=[],
                labels={"pitch": np.zeros(3, dtype=np.int64)},
            )
