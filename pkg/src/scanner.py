"""
Audio corpus scanner.

Scans corpus directories for audio clips and computes their log-mel
spectrograms with a thread pool.
"""

import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

from .frontend import FrontendConfig, LogMelSpectrogram, compute_logmel, load_waveform

AUDIO_EXTENSIONS = {".wav", ".flac"}


@dataclass
class AudioFile:
    """Represents an audio clip found in a corpus directory."""

    path: Path  # Full path to the clip
    filename: str  # Original filename
    corpus_key: str  # Top-level folder name (e.g., 'speech', 'noise')
    source_root: Path  # Root directory this clip was found in

    @property
    def extension(self) -> str:
        """Get the file extension."""
        return self.path.suffix.lower()

    @property
    def clip_id(self) -> str:
        """Clip id: the filename without its extension."""
        return self.path.stem


def _is_hidden(name: str) -> bool:
    return name.startswith(".") or name.startswith("_")


def scan_audio_directory(source_dir: Path) -> Iterator[AudioFile]:
    """
    Scan a directory of audio clips and yield AudioFile objects in sorted order.

    Expected structure:
        source_dir/
            clip.wav
            [optional_subdir/]
                clip.wav

    Args:
        source_dir: Path to the clip directory

    Yields:
        AudioFile objects for each clip found
    """
    source_dir = Path(source_dir)

    if not source_dir.exists():
        raise FileNotFoundError(f"Audio directory not found: {source_dir}")

    if not source_dir.is_dir():
        raise NotADirectoryError(f"Not a directory: {source_dir}")

    for root, dirs, files in os.walk(source_dir):
        # Sorted walk so clip order never depends on the filesystem
        dirs[:] = sorted(d for d in dirs if not _is_hidden(d))

        for filename in sorted(files):
            if _is_hidden(filename):
                continue
            filepath = Path(root) / filename
            if filepath.suffix.lower() not in AUDIO_EXTENSIONS:
                continue

            yield AudioFile(
                path=filepath,
                filename=filename,
                corpus_key=source_dir.name,
                source_root=source_dir,
            )


def load_spectrograms(
    files: list[AudioFile],
    cfg: FrontendConfig | None = None,
    max_workers: int = 4,
    progress_callback: Callable[[str], None] | None = None,
) -> list[LogMelSpectrogram]:
    """
    Compute the log-mel spectrogram of every clip.

    Work runs concurrently; results are placed by input index, so the output
    order always matches `files`.

    Args:
        files: Clips to load
        cfg: Frontend configuration
        max_workers: Number of concurrent loaders (default: 4)
        progress_callback: Optional callback for progress messages

    Returns:
        One unnormalized spectrogram per file
    """
    cfg = cfg or FrontendConfig()
    results: list[LogMelSpectrogram | None] = [None] * len(files)

    def task(index: int) -> tuple[int, LogMelSpectrogram]:
        return index, compute_logmel(load_waveform(files[index].path, cfg), cfg)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {executor.submit(task, i): i for i in range(len(files))}
        for done, future in enumerate(as_completed(futures), 1):
            index, spec = future.result()
            results[index] = spec
            if progress_callback and (done % 50 == 0 or done == len(files)):
                progress_callback(f"    Loaded {done}/{len(files)} clips")

    return results  # type: ignore[return-value]
