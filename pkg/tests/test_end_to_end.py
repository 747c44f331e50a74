"""
Desk-scale runs: toy corpus -> pre-training -> probing. Selected with `-m slow`.
"""

import math

import numpy as np
import pytest

from src.ablation import AblationGrid, run_ablation
from src.config import to_flat
from src.corpus import TaskSpec, ToyCorpusSpec, from_toy_corpus, generate_toy_corpus
from src.evaluation import PROBE_MODES, ProbeConfig, extract_layer_features, run_eval_suite, train_probe
from src.training import TrainConfig, restore_model, run_pretraining


@pytest.fixture(scope="module")
def toy():
    spec = ToyCorpusSpec(n_clips=64, tasks=(TaskSpec("pitch", 2), TaskSpec("timbre", 3)), seed=1)
    return from_toy_corpus(generate_toy_corpus(spec))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """256 clips, tiny encoder, 80x4 patches, alpha 0.2, 200 steps."""
    out = tmp_path_factory.mktemp("smoke")
    spec = ToyCorpusSpec(n_clips=256, tasks=(TaskSpec("pitch", 2),), seed=2)
    corpus = from_toy_corpus(generate_toy_corpus(spec))
    cfg = TrainConfig(epochs=25, warmup_epochs=3, batch_size=32, alpha=0.2)
    result = run_pretraining(cfg, corpus, out / "run")
    return corpus, result, out


@pytest.mark.slow
class TestDeskScale:
    """End-to-end runs on the default toy corpus."""

    def test_pitch_is_linearly_decodable(self, tmp_path, toy):
        """Test a short pre-training run yields features that separate pitch."""
        cfg = TrainConfig(epochs=3, warmup_epochs=1)
        result = run_pretraining(cfg, toy, tmp_path / "run")
        assert result.steps == 24
        evaluation = run_eval_suite(
            result.final_checkpoint, toy, tasks=["pitch"], modes=("weighted-sum",), out_dir=tmp_path / "probe"
        )
        assert evaluation.reports[0].accuracy >= 0.9
        assert evaluation.checksum_before == evaluation.checksum_after

    def test_task_row_grid(self, tmp_path, toy):
        """Test a two-row grid trains and probes both cells."""
        base = to_flat(TrainConfig(epochs=2, warmup_epochs=1))
        grid = AblationGrid(task_rows=("a", "e"))
        result = run_ablation(base, grid, toy, tmp_path, probe_cfg=ProbeConfig(epochs=100), tasks=["pitch"])
        assert [c.status for c in result.cells] == ["ok", "ok"]
        assert result.summary_path.exists()


@pytest.mark.slow
class TestSmokeRun:
    """A 200-step run on 256 clips, then probing."""

    def test_loss_drops(self, smoke_run):
        """Test the mean of the last 10 losses is at most 80% of the first 10."""
        _, result, _ = smoke_run
        totals = [r.losses.l_total for r in result.records]
        assert len(totals) == 200
        assert all(math.isfinite(t) for t in totals)
        assert np.mean(totals[-10:]) <= 0.8 * np.mean(totals[:10])

    def test_pitch_probes(self, smoke_run):
        """Test final-layer pitch accuracy >= 0.9 and weighted-sum within 0.05 of it."""
        corpus, result, out = smoke_run
        restored = restore_model(result.final_checkpoint, with_teacher=False)
        evaluation = run_eval_suite(
            result.final_checkpoint, corpus, tasks=["pitch"], modes=PROBE_MODES,
            out_dir=out / "probe", restored=restored,
        )
        accuracy = {r.mode: r.accuracy for r in evaluation.reports}
        assert accuracy["final-layer"] >= 0.9
        assert accuracy["weighted-sum"] >= accuracy["final-layer"] - 0.05
        assert evaluation.checksum_before == evaluation.checksum_after

    def test_shuffled_labels_at_chance(self, smoke_run):
        """Test probes on permuted pitch labels average 0.5 +- 0.1 over five permutations."""
        corpus, result, _ = smoke_run
        state, cfg, stats = restore_model(result.final_checkpoint, with_teacher=False)
        features = extract_layer_features(state, corpus, cfg, stats)
        rng = np.random.default_rng(0)
        accuracies = [
            train_probe(features, rng.permutation(corpus.labels["pitch"]), ProbeConfig(), task="pitch").accuracy
            for _ in range(5)
        ]
        assert abs(np.mean(accuracies) - 0.5) <= 0.1
