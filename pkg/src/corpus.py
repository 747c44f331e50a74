"""
Synthetic speech-like corpora and on-disk corpus loading.

Toy "speech" clips are harmonic tone complexes whose parameters encode one
class per task:

    pitch    f0 = 150 * 2**c Hz with a rising (even c) or falling (odd c) contour
    timbre   harmonic amplitudes fall off as h ** -(1.0 + 0.3 * c)
    emotion  class 0 is calm; higher classes add vibrato, tremolo and level

Every clip carries one label per task. The noise corpus is band-pass filtered
white noise. A corpus directory looks like:

    corpus/
        speech/clip_0000.wav ...
        noise/noise_0000.wav ...
        labels.csv            clip_id,<task>,<task>,...
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal

from .errors import ConfigError, InvalidInputError
from .frontend import FrontendConfig, LogMelSpectrogram, compute_logmel, write_waveform
from .scanner import load_spectrograms, scan_audio_directory

logger = logging.getLogger(__name__)

SPEECH_DIR = "speech"
NOISE_DIR = "noise"
LABELS_FILE = "labels.csv"

TASK_KINDS = ("pitch", "timbre", "emotion")
MAX_CLASSES = {"pitch": 4, "timbre": 5, "emotion": 4}
MAX_HARMONICS = 8
BASE_F0 = 150.0


@dataclass(frozen=True)
class TaskSpec:
    """A toy classification task: which clip property varies and how many classes."""

    name: str
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.name not in TASK_KINDS:
            raise ConfigError(f"Unknown task '{self.name}', expected one of {TASK_KINDS}")
        if not 2 <= self.n_classes <= MAX_CLASSES[self.name]:
            raise ConfigError(
                f"Task '{self.name}' needs 2..{MAX_CLASSES[self.name]} classes, got {self.n_classes}"
            )


DEFAULT_TASKS = (TaskSpec("pitch", 2), TaskSpec("timbre", 3), TaskSpec("emotion", 2))


def parse_task_list(text: str) -> tuple[TaskSpec, ...]:
    """
    Parse "pitch:2,timbre:3" (class count optional, default per DEFAULT_TASKS).

    Raises:
        ConfigError: on malformed entries or duplicate tasks
    """
    defaults = {t.name: t.n_classes for t in DEFAULT_TASKS}
    tasks: list[TaskSpec] = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        name, _, count = entry.partition(":")
        if name not in defaults:
            raise ConfigError(f"Unknown task '{name}', expected one of {TASK_KINDS}")
        try:
            n_classes = int(count) if count else defaults[name]
        except ValueError as e:
            raise ConfigError(f"Invalid class count in '{entry}'") from e
        tasks.append(TaskSpec(name, n_classes))
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"Duplicate task in '{text}'")
    return tuple(tasks)


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Size, duration, tasks and seed of a synthetic corpus."""

    n_clips: int = 64
    duration_s: float = 2.5
    tasks: tuple[TaskSpec, ...] = DEFAULT_TASKS
    n_noise_clips: int = 16
    noise_duration_s: float = 4.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clips < 2:
            raise ConfigError(f"n_clips must be >= 2, got {self.n_clips}")
        if self.n_noise_clips < 1:
            raise ConfigError(f"n_noise_clips must be >= 1, got {self.n_noise_clips}")
        if self.duration_s <= 0 or self.noise_duration_s <= 0:
            raise ConfigError("Clip durations must be positive")
        if not self.tasks:
            raise ConfigError("At least one task is required")
        for task in self.tasks:
            if self.n_clips < task.n_classes:
                raise ConfigError(
                    f"{self.n_clips} clips cannot cover the {task.n_classes} classes of '{task.name}'"
                )


@dataclass
class ToyCorpus:
    """Generated waveforms and labels, before they are written to disk."""

    clip_ids: list[str]
    speech: list[np.ndarray]
    noise_ids: list[str]
    noise: list[np.ndarray]
    labels: dict[str, np.ndarray]
    sample_rate: int


@dataclass
class LoadedCorpus:
    """Log-mel spectrograms of a speech and a noise corpus, plus task labels."""

    name: str
    clip_ids: list[str]
    speech: list[LogMelSpectrogram]
    noise_ids: list[str]
    noise: list[LogMelSpectrogram]
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.clip_ids) != len(self.speech) or len(self.noise_ids) != len(self.noise):
            raise InvalidInputError("Clip ids and spectrograms are not aligned")
        for task, labels in self.labels.items():
            if len(labels) != len(self.speech):
                raise InvalidInputError(f"Task '{task}' has {len(labels)} labels for {len(self.speech)} clips")


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled labels whose class counts differ by at most one."""
    tiled = np.tile(np.arange(n_classes), -(-n // n_classes))[:n]
    return rng.permutation(tiled)


def _class_fraction(c: int, n_classes: int) -> float:
    return c / (n_classes - 1)


def synthesize_clip(
    classes: dict[str, int],
    n_classes: dict[str, int],
    duration_s: float,
    sample_rate: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Render one harmonic tone complex for a combination of task classes.

    Tasks absent from `classes` fall back to class 0.
    """
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    pitch = classes.get("pitch", 0)
    f0 = BASE_F0 * 2.0 ** pitch * rng.uniform(0.95, 1.05)
    ramp = np.linspace(0.9, 1.1, n)
    contour = ramp if pitch % 2 == 0 else ramp[::-1]

    rolloff = 1.0 + 0.3 * classes.get("timbre", 0)

    arousal = 0.0
    if "emotion" in classes:
        arousal = _class_fraction(classes["emotion"], n_classes["emotion"])
    vibrato = 1.0 + 0.03 * arousal * np.sin(2 * np.pi * 6.0 * t + rng.uniform(0, 2 * np.pi))
    tremolo = 1.0 - 0.5 * arousal * (0.5 + 0.5 * np.sin(2 * np.pi * 8.0 * t))
    level = 0.4 + 0.4 * arousal

    inst_f0 = f0 * contour * vibrato
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate
    nyquist_guard = 0.475 * sample_rate

    wave = np.zeros(n)
    for h in range(1, MAX_HARMONICS + 1):
        if h * inst_f0.max() >= nyquist_guard:
            break
        wave += h ** -rolloff * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    wave *= tremolo
    # Short fades keep clip edges click-free
    fade = min(n // 10, int(0.01 * sample_rate))
    if fade > 0:
        window = np.linspace(0.0, 1.0, fade)
        wave[:fade] *= window
        wave[-fade:] *= window[::-1]
    wave *= level / max(np.abs(wave).max(), 1e-9)
    return wave.astype(np.float32)


def synthesize_noise(duration_s: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Band-pass filtered white noise with a random band, RMS 0.1."""
    n = int(round(duration_s * sample_rate))
    low = rng.uniform(100.0, 1000.0)
    high = min(low * rng.uniform(2.0, 6.0), 0.45 * sample_rate)
    sos = signal.butter(4, [low, high], btype="bandpass", fs=sample_rate, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    noise *= 0.1 / max(np.sqrt(np.mean(noise**2)), 1e-9)
    return np.clip(noise, -0.99, 0.99).astype(np.float32)


def generate_toy_corpus(spec: ToyCorpusSpec) -> ToyCorpus:
    """
    Generate the labeled speech-like corpus and a matched noise corpus.

    Every clip draws from its own generator seeded by (seed, stream, index),
    so the corpus is a pure function of the spec.
    """
    label_rng = np.random.default_rng([spec.seed, 2])
    labels = {
        task.name: balanced_labels(spec.n_clips, task.n_classes, label_rng) for task in spec.tasks
    }
    n_classes = {task.name: task.n_classes for task in spec.tasks}

    clip_ids, speech = [], []
    for i in range(spec.n_clips):
        classes = {name: int(values[i]) for name, values in labels.items()}
        rng = np.random.default_rng([spec.seed, 0, i])
        clip_ids.append(f"clip_{i:04d}")
        speech.append(synthesize_clip(classes, n_classes, spec.duration_s, spec.sample_rate, rng))

    noise_ids, noise = [], []
    for i in range(spec.n_noise_clips):
        rng = np.random.default_rng([spec.seed, 1, i])
        noise_ids.append(f"noise_{i:04d}")
        noise.append(synthesize_noise(spec.noise_duration_s, spec.sample_rate, rng))

    return ToyCorpus(
        clip_ids=clip_ids,
        speech=speech,
        noise_ids=noise_ids,
        noise=noise,
        labels=labels,
        sample_rate=spec.sample_rate,
    )


def write_toy_corpus(corpus: ToyCorpus, out_dir: Path) -> Path:
    """Write speech/, noise/ and labels.csv under out_dir (created if missing)."""
    out_dir = Path(out_dir)
    for clip_id, wave in zip(corpus.clip_ids, corpus.speech):
        write_waveform(out_dir / SPEECH_DIR / f"{clip_id}.wav", wave, corpus.sample_rate)
    for noise_id, wave in zip(corpus.noise_ids, corpus.noise):
        write_waveform(out_dir / NOISE_DIR / f"{noise_id}.wav", wave, corpus.sample_rate)

    tasks = list(corpus.labels)
    with open(out_dir / LABELS_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["clip_id", *tasks])
        for i, clip_id in enumerate(corpus.clip_ids):
            writer.writerow([clip_id, *(int(corpus.labels[t][i]) for t in tasks)])
    return out_dir


def read_labels(path: Path, clip_ids: list[str]) -> dict[str, np.ndarray]:
    """
    Read labels.csv and align it with clip_ids.

    Raises:
        InvalidInputError: if a clip has no label row
    """
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    by_id = {row["clip_id"]: row for row in rows}
    tasks = [name for name in rows[0] if name != "clip_id"]
    missing = [c for c in clip_ids if c not in by_id]
    if missing:
        raise InvalidInputError(f"labels.csv lacks {len(missing)} clips, e.g. {missing[0]}")
    return {
        task: np.array([int(by_id[c][task]) for c in clip_ids], dtype=np.int64) for task in tasks
    }


def from_toy_corpus(corpus: ToyCorpus, cfg: FrontendConfig | None = None, name: str = "toy") -> LoadedCorpus:
    """Compute spectrograms of an in-memory toy corpus."""
    cfg = cfg or FrontendConfig()
    if corpus.sample_rate != cfg.sample_rate:
        raise InvalidInputError(
            f"Corpus is {corpus.sample_rate} Hz but the frontend expects {cfg.sample_rate} Hz"
        )
    return LoadedCorpus(
        name=name,
        clip_ids=list(corpus.clip_ids),
        speech=[compute_logmel(w, cfg) for w in corpus.speech],
        noise_ids=list(corpus.noise_ids),
        noise=[compute_logmel(w, cfg) for w in corpus.noise],
        labels={k: v.copy() for k, v in corpus.labels.items()},
    )


def load_corpus(
    corpus_dir: Path,
    cfg: FrontendConfig | None = None,
    noise_dir: Path | None = None,
    max_workers: int = 4,
    progress_callback: Callable[[str], None] | None = None,
) -> LoadedCorpus:
    """
    Load a corpus directory (speech/, noise/, optional labels.csv).

    Args:
        corpus_dir: Corpus root
        cfg: Frontend configuration
        noise_dir: Noise clips elsewhere (default: corpus_dir/noise)
        max_workers: Concurrent clip loaders
        progress_callback: Optional callback for progress messages

    Raises:
        FileNotFoundError: if the corpus or its speech folder is missing
        InvalidInputError: if there are no speech clips
    """
    cfg = cfg or FrontendConfig()
    corpus_dir = Path(corpus_dir)
    speech_files = list(scan_audio_directory(corpus_dir / SPEECH_DIR))
    if not speech_files:
        raise InvalidInputError(f"No speech clips in {corpus_dir / SPEECH_DIR}")

    noise_root = Path(noise_dir) if noise_dir else corpus_dir / NOISE_DIR
    noise_files = list(scan_audio_directory(noise_root)) if noise_root.exists() else []

    if progress_callback:
        progress_callback(f"  Loading {len(speech_files)} speech and {len(noise_files)} noise clips...")
    speech = load_spectrograms(speech_files, cfg, max_workers, progress_callback)
    noise = load_spectrograms(noise_files, cfg, max_workers, progress_callback)

    clip_ids = [f.clip_id for f in speech_files]
    labels_path = corpus_dir / LABELS_FILE
    labels = read_labels(labels_path, clip_ids) if labels_path.exists() else {}
    logger.debug("Loaded corpus %s: %d speech, %d noise clips", corpus_dir, len(speech), len(noise))

    return LoadedCorpus(
        name=corpus_dir.name,
        clip_ids=clip_ids,
        speech=speech,
        noise_ids=[f.clip_id for f in noise_files],
        noise=noise,
        labels=labels,
    )
