"""
Ablation grids.

Each axis of a grid varies one knob around the base configuration:
dataset noise ratio, patch size, input duration, or a task row that switches
the two losses and alpha together. Every cell is pre-trained and probed; a
failed cell is recorded and the grid carries on.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .config import build_train_config
from .corpus import LoadedCorpus
from .errors import ConfigError
from .evaluation import PROBE_MODES, ProbeConfig, evaluate_state
from .training import Pretrainer, PretrainOptions

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"

# row -> (lambda_m2d, lambda_off, alpha)
TASK_ROWS: dict[str, tuple[float, float, float]] = {
    "a": (1.0, 0.0, 0.0),
    "b": (0.0, 1.0, 0.0),
    "c": (0.0, 1.0, 0.2),
    "d": (1.0, 1.0, 0.0),
    "e": (1.0, 1.0, 0.2),
}


def parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"Expected comma-separated numbers, got '{text}'") from e


def parse_patch_sizes(text: str) -> tuple[tuple[int, int], ...]:
    """Parse "80x2,80x4,40x4" into (patch_freq, patch_time) pairs."""
    sizes = []
    for entry in text.split(","):
        entry = entry.strip().lower()
        if not entry:
            continue
        freq, sep, time = entry.partition("x")
        try:
            sizes.append((int(freq), int(time)))
        except ValueError as e:
            raise ConfigError(f"Patch sizes look like 80x4, got '{entry}'") from e
        if not sep:
            raise ConfigError(f"Patch sizes look like 80x4, got '{entry}'")
    return tuple(sizes)


@dataclass(frozen=True)
class AblationCell:
    """One grid cell: a name and the flat config keys it overrides."""

    name: str
    overrides: tuple[tuple[str, Any], ...]

    @property
    def slug(self) -> str:
        return self.name.replace("=", "_").replace(".", "p")


@dataclass(frozen=True)
class AblationGrid:
    """Values per axis; an empty axis is not swept."""

    alphas: tuple[float, ...] = ()
    patch_sizes: tuple[tuple[int, int], ...] = ()
    durations: tuple[float, ...] = ()
    task_rows: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (self.alphas or self.patch_sizes or self.durations or self.task_rows):
            raise ConfigError("An ablation grid needs at least one axis")
        unknown = [r for r in self.task_rows if r not in TASK_ROWS]
        if unknown:
            raise ConfigError(f"Unknown task row(s) {unknown}, expected {sorted(TASK_ROWS)}")

    def cells(self) -> list[AblationCell]:
        cells = [AblationCell(f"alpha={a:g}", (("alpha", a),)) for a in self.alphas]
        cells += [
            AblationCell(f"patch={f}x{t}", (("patch_freq", f), ("patch_time", t)))
            for f, t in self.patch_sizes
        ]
        cells += [
            AblationCell(f"duration={d:.2f}", (("input_duration_s", d),)) for d in self.durations
        ]
        for row in self.task_rows:
            lambda_m2d, lambda_off, alpha = TASK_ROWS[row]
            cells.append(
                AblationCell(
                    f"row={row}",
                    (("lambda_m2d", lambda_m2d), ("lambda_off", lambda_off), ("alpha", alpha)),
                )
            )
        return cells


@dataclass
class CellResult:
    """Outcome of one cell: accuracy per column, or the error that stopped it."""

    cell: str
    status: str = "ok"
    accuracies: dict[str, float] = field(default_factory=dict)
    error: str = ""


@dataclass
class AblationOptions:
    """Options for an ablation run."""

    verbose: bool = False
    progress_callback: Callable[[str], None] | None = None
    parallel: bool = False
    max_workers: int = 2
    probe_cfg: ProbeConfig = field(default_factory=ProbeConfig)
    modes: tuple[str, ...] = ("weighted-sum",)
    tasks: tuple[str, ...] | None = None


@dataclass
class AblationResult:
    """Results from an ablation run, in grid order."""

    cells: list[CellResult] = field(default_factory=list)
    summary_path: Path | None = None
    errors: list[str] = field(default_factory=list)


class AblationRunner:
    """
    Pre-trains and probes every cell of a grid.
    """

    def __init__(
        self,
        base: Mapping[str, Any],
        grid: AblationGrid,
        options: AblationOptions | None = None,
    ):
        self.base = dict(base)
        self.grid = grid
        self.options = options or AblationOptions()
        if not self.options.modes or any(m not in PROBE_MODES for m in self.options.modes):
            raise ConfigError(f"Probe modes must be among {PROBE_MODES}, got {self.options.modes}")
        self.result = AblationResult()

    def _log(self, message: str) -> None:
        """Log a message if verbose mode is enabled."""
        if self.options.verbose and self.options.progress_callback:
            self.options.progress_callback(message)

    def _column(self, task: str, mode: str) -> str:
        return task if len(self.options.modes) == 1 else f"{task}:{mode}"

    def _run_cell(self, cell: AblationCell, corpus: LoadedCorpus, out_dir: Path) -> CellResult:
        result = CellResult(cell=cell.name)
        try:
            cfg = build_train_config({**self.base, **dict(cell.overrides)})
            trainer = Pretrainer(cfg, PretrainOptions())
            trained = trainer.run(corpus, out_dir / cell.slug)
            evaluation = evaluate_state(
                trainer.state,
                cfg,
                trained.stats,
                corpus,
                self.options.tasks,
                self.options.probe_cfg,
                self.options.modes,
            )
            for report in evaluation.reports:
                result.accuracies[self._column(report.task, report.mode)] = report.accuracy
            if evaluation.errors:
                result.error = "; ".join(evaluation.errors)
        except Exception as e:
            logger.warning("Ablation cell %s failed: %s", cell.name, e)
            result.status = "failed"
            result.error = str(e)
        return result

    def run(self, corpus: LoadedCorpus, out_dir: Path) -> AblationResult:
        """
        Run every cell and write summary.csv.

        Args:
            corpus: Labeled speech/noise corpus shared by all cells
            out_dir: One sub-directory per cell plus the summary

        Returns:
            AblationResult with one CellResult per cell, in grid order
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cells = self.grid.cells()
        results: list[CellResult | None] = [None] * len(cells)

        if self.options.parallel and len(cells) > 1:
            self._log(f"Running {len(cells)} cells ({self.options.max_workers} concurrent)...")
            with ThreadPoolExecutor(max_workers=self.options.max_workers) as executor:
                futures = {
                    executor.submit(self._run_cell, cell, corpus, out_dir): i
                    for i, cell in enumerate(cells)
                }
                for future in as_completed(futures):
                    i = futures[future]
                    results[i] = future.result()
                    self._log(f"  {cells[i].name}: {results[i].status}")
        else:
            for i, cell in enumerate(cells):
                self._log(f"  Cell {i + 1}/{len(cells)}: {cell.name}")
                results[i] = self._run_cell(cell, corpus, out_dir)
                self._log(f"    {results[i].status}")

        self.result.cells = [r for r in results if r is not None]
        self.result.errors = [f"{r.cell}: {r.error}" for r in self.result.cells if r.error]
        self.result.summary_path = write_summary(self.result.cells, out_dir / SUMMARY_FILE)
        return self.result


def write_summary(cells: Sequence[CellResult], path: Path) -> Path:
    """Write one row per cell: cell,status,<accuracy columns...>,error."""
    columns: list[str] = []
    for cell in cells:
        for name in cell.accuracies:
            if name not in columns:
                columns.append(name)

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["cell", "status", *columns, "error"])
        for cell in cells:
            accuracies = [
                f"{cell.accuracies[c]:.4f}" if c in cell.accuracies else "" for c in columns
            ]
            writer.writerow([cell.cell, cell.status, *accuracies, cell.error])
    return Path(path)


def run_ablation(
    base: Mapping[str, Any],
    grid: AblationGrid,
    corpus: LoadedCorpus,
    out_dir: Path,
    parallel: bool = False,
    max_workers: int = 2,
    probe_cfg: ProbeConfig | None = None,
    tasks: Sequence[str] | None = None,
    modes: Sequence[str] = ("weighted-sum",),
    verbose: bool = False,
    progress_callback: Callable[[str], None] | None = None,
) -> AblationResult:
    """
    Convenience function to run an ablation grid.

    Args:
        base: Flat config keys shared by every cell
        grid: Axes to sweep
        corpus: Labeled speech/noise corpus
        out_dir: Output directory
        parallel: Run cells concurrently
        max_workers: Concurrent cells when parallel
        probe_cfg: Probe settings
        tasks: Tasks to probe (default: all labeled tasks)
        modes: Probe modes; with more than one, columns are named task:mode
        verbose: Show progress
        progress_callback: Optional callback for progress messages
    """
    options = AblationOptions(
        verbose=verbose,
        progress_callback=progress_callback or (print if verbose else None),
        parallel=parallel,
        max_workers=max_workers,
        probe_cfg=probe_cfg or ProbeConfig(),
        modes=tuple(modes),
        tasks=tuple(tasks) if tasks is not None else None,
    )
    return AblationRunner(base, grid, options).run(corpus, out_dir)
