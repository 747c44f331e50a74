"""
Unit tests for ablation grids.
"""

import csv

import pytest

from src.ablation import (
    SUMMARY_FILE,
    AblationGrid,
    CellResult,
    parse_float_list,
    parse_patch_sizes,
    run_ablation,
    write_summary,
)
from src.errors import ConfigError
from src.evaluation import PROBE_MODES, ProbeConfig
from tests.conftest import TINY_FLAT


class TestParsers:
    """Tests for the grid axis parsers."""

    def test_float_list(self):
        """Test comma-separated numbers."""
        assert parse_float_list("0, 0.2,0.4,") == (0.0, 0.2, 0.4)
        with pytest.raises(ConfigError):
            parse_float_list("0.2,high")

    def test_patch_sizes(self):
        """Test FxT patch sizes."""
        assert parse_patch_sizes("80x2, 40X4") == ((80, 2), (40, 4))
        for text in ("80", "80xfour", "x4"):
            with pytest.raises(ConfigError):
                parse_patch_sizes(text)


class TestAblationGrid:
    """Tests for AblationGrid cells."""

    def test_cell_counts(self):
        """Test one cell per axis value, in axis order."""
        grid = AblationGrid(
            alphas=(0.0, 0.2, 0.4),
            patch_sizes=((80, 2), (80, 4), (40, 4)),
            durations=(0.96, 2.08),
            task_rows=("a", "e"),
        )
        names = [c.name for c in grid.cells()]
        assert names == [
            "alpha=0", "alpha=0.2", "alpha=0.4",
            "patch=80x2", "patch=80x4", "patch=40x4",
            "duration=0.96", "duration=2.08",
            "row=a", "row=e",
        ]

    def test_task_row_overrides(self):
        """Test a task row switches both losses and alpha."""
        (cell,) = AblationGrid(task_rows=("c",)).cells()
        assert dict(cell.overrides) == {"lambda_m2d": 0.0, "lambda_off": 1.0, "alpha": 0.2}
        assert cell.slug == "row_c"
        assert AblationGrid(alphas=(0.2,)).cells()[0].slug == "alpha_0p2"

    def test_invalid(self):
        """Test empty grids and unknown rows are rejected."""
        with pytest.raises(ConfigError):
            AblationGrid()
        with pytest.raises(ConfigError):
            AblationGrid(task_rows=("f",))


class TestWriteSummary:
    """Tests for write_summary function."""

    def test_columns(self, tmp_path):
        """Test the union of accuracy columns with blanks for failed cells."""
        cells = [
            CellResult(cell="alpha=0", accuracies={"pitch": 0.75}),
            CellResult(cell="row=b", status="failed", error="boom"),
        ]
        write_summary(cells, tmp_path / SUMMARY_FILE)
        assert (tmp_path / SUMMARY_FILE).read_text().splitlines() == [
            "cell,status,pitch,error",
            "alpha=0,ok,0.7500,",
            "row=b,failed,,boom",
        ]


class TestRunAblation:
    """Tests for run_ablation function."""

    def test_failed_cell_is_recorded(self, tmp_path, corpus):
        """Test a failing cell is reported and the grid carries on."""
        base = {**TINY_FLAT, "teacher": "none", "lambda_off": 0.0}
        grid = AblationGrid(alphas=(0.0,), task_rows=("b",))
        result = run_ablation(base, grid, corpus, tmp_path, probe_cfg=ProbeConfig(epochs=10))

        assert [(c.cell, c.status) for c in result.cells] == [("alpha=0", "ok"), ("row=b", "failed")]
        assert "teacher" in result.cells[1].error
        assert 0.0 <= result.cells[0].accuracies["pitch"] <= 1.0
        assert len(result.errors) == 1
        assert (tmp_path / "alpha_0" / "train_log.txt").exists()

        with open(result.summary_path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["status"] for r in rows] == ["ok", "failed"]
        assert rows[1]["pitch"] == ""

    def test_parallel_keeps_grid_order(self, tmp_path, corpus):
        """Test concurrent cells are reported in grid order."""
        grid = AblationGrid(alphas=(0.0, 0.2))
        result = run_ablation(
            TINY_FLAT, grid, corpus, tmp_path, parallel=True, probe_cfg=ProbeConfig(epochs=10)
        )
        assert [c.cell for c in result.cells] == ["alpha=0", "alpha=0.2"]
        assert all(c.status == "ok" for c in result.cells)

    def test_both_modes_name_columns(self, tmp_path, corpus):
        """Test two probe modes give task:mode columns for each cell."""
        grid = AblationGrid(alphas=(0.0,))
        result = run_ablation(
            TINY_FLAT, grid, corpus, tmp_path, probe_cfg=ProbeConfig(epochs=10), modes=PROBE_MODES
        )
        assert sorted(result.cells[0].accuracies) == ["pitch:final-layer", "pitch:weighted-sum"]
        header = result.summary_path.read_text().splitlines()[0]
        assert header == "cell,status,pitch:weighted-sum,pitch:final-layer,error"

    def test_invalid_modes(self, tmp_path, corpus):
        """Test an empty or unknown mode list is rejected."""
        for modes in ((), ("mlp",)):
            with pytest.raises(ConfigError):
                run_ablation(TINY_FLAT, AblationGrid(alphas=(0.0,)), corpus, tmp_path, modes=modes)
