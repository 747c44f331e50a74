"""
Log-mel frontend and noisy-speech mixing.

Converts mono 16 kHz waveforms to log-mel spectrograms, normalizes them with
dataset statistics, samples background-noise segments and mixes speech with
noise at a dataset noise ratio alpha in the linear (mel energy) domain.

Spectrogram values are always laid out as [n_mels, n_frames].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import soundfile as sf
import torch
import torchaudio

from .errors import ConfigError, InvalidInputError, ShapeMismatchError

STD_EPSILON = 1e-7


@dataclass(frozen=True)
class FrontendConfig:
    """Log-mel frontend parameters (times in ms, frequencies in Hz)."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fmin: float = 50.0
    fmax: float = 8000.0
    log_floor: float = 1e-5  # added to mel energies before the log

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"Need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, "
                f"fmax={self.fmax}, sample_rate={self.sample_rate}"
            )
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 < self.hop_ms <= self.window_ms:
            raise ConfigError(
                f"Need 0 < hop <= window, got hop={self.hop_ms}, window={self.window_ms}"
            )
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def win_length(self) -> int:
        """Window length in samples."""
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        """Hop length in samples."""
        return int(round(self.sample_rate * self.hop_ms / 1000))

    def frames_for(self, duration_s: float) -> int:
        """
        Number of frames covering a duration.

        Raises:
            ConfigError: if the duration is not a whole number of hops
        """
        exact = duration_s * 1000.0 / self.hop_ms
        frames = int(round(exact))
        if frames < 1 or abs(exact - frames) > 1e-6:
            raise ConfigError(
                f"Duration {duration_s}s is not a whole number of {self.hop_ms} ms frames"
            )
        return frames


@dataclass
class LogMelSpectrogram:
    """A log-mel matrix plus the frontend settings and normalization provenance."""

    values: torch.Tensor  # [n_mels, n_frames]
    config: FrontendConfig = field(default_factory=FrontendConfig)
    normalized: bool = False
    stats_id: str | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ShapeMismatchError(
                f"Spectrogram must be 2-D [n_mels, n_frames], got {tuple(self.values.shape)}"
            )
        if self.values.shape[0] != self.config.n_mels:
            raise ShapeMismatchError(
                f"Spectrogram has {self.values.shape[0]} mel bins, config says {self.config.n_mels}"
            )
        if self.values.shape[1] < 1:
            raise InvalidInputError("Spectrogram must have at least one frame")
        if not torch.isfinite(self.values).all():
            raise InvalidInputError("Spectrogram contains non-finite values")
        if self.normalized != (self.stats_id is not None):
            raise InvalidInputError("normalized flag and stats_id disagree")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Dataset statistics: one scalar mean/std pair over every value of a corpus."""

    mean: float
    std: float
    corpus_id: str
    n_frames_seen: int

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise InvalidInputError(f"std must be positive, got {self.std}")
        if self.n_frames_seen <= 0:
            raise InvalidInputError("NormStats must be computed from at least one frame")

    @property
    def stats_id(self) -> str:
        return self.corpus_id

    def save(self, path: Path) -> None:
        """Write the statistics as key=value lines."""
        Path(path).write_text(
            f"mean={self.mean!r}\n"
            f"std={self.std!r}\n"
            f"corpus_id={self.corpus_id}\n"
            f"n_frames_seen={self.n_frames_seen}\n"
        )

    @classmethod
    def load(cls, path: Path) -> "NormStats":
        """Read statistics written by save()."""
        entries = read_key_values(Path(path))
        try:
            return cls(
                mean=float(entries["mean"]),
                std=float(entries["std"]),
                corpus_id=entries["corpus_id"],
                n_frames_seen=int(entries.get("n_frames_seen", "1")),
            )
        except KeyError as e:
            raise InvalidInputError(f"Stats file {path} is missing key {e}") from e


@dataclass(frozen=True)
class MixConfig:
    """Noise mixing settings: alpha is the noise share of the linear mixture."""

    alpha: float = 0.2
    noise_corpus: str = "noise"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


def read_key_values(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidInputError(f"Malformed line in {path}: {line!r}")
        entries[key.strip()] = value.strip()
    return entries


@lru_cache(maxsize=8)
def _mel_transform(cfg: FrontendConfig) -> torchaudio.transforms.MelSpectrogram:
    return torchaudio.transforms.MelSpectrogram(
        sample_rate=cfg.sample_rate,
        n_fft=cfg.win_length,
        win_length=cfg.win_length,
        hop_length=cfg.hop_length,
        f_min=cfg.fmin,
        f_max=cfg.fmax,
        n_mels=cfg.n_mels,
        window_fn=torch.hann_window,
        power=2.0,
        center=True,
        pad_mode="reflect",
        norm=None,
        mel_scale="htk",
    )


def compute_logmel(
    waveform: torch.Tensor | np.ndarray,
    cfg: FrontendConfig | None = None,
    sample_rate: int | None = None,
) -> LogMelSpectrogram:
    """
    Compute the log-mel spectrogram of a mono waveform.

    The frame count is floor(n_samples / hop_length), so 2.08 s at a 10 ms hop
    gives exactly 208 frames.

    Args:
        waveform: 1-D mono samples at cfg.sample_rate
        cfg: Frontend configuration (defaults to FrontendConfig())
        sample_rate: Rate of the waveform if known; must equal cfg.sample_rate

    Returns:
        Unnormalized LogMelSpectrogram of shape [n_mels, n_frames]

    Raises:
        InvalidInputError: empty, too short, multi-channel or non-finite input,
            or a sample-rate mismatch (there is no resampling)
    """
    cfg = cfg or FrontendConfig()
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise InvalidInputError(
            f"Expected {cfg.sample_rate} Hz audio, got {sample_rate} Hz (no resampling)"
        )

    x = torch.as_tensor(np.asarray(waveform), dtype=torch.float32)
    if x.ndim != 1:
        raise InvalidInputError(f"Waveform must be mono 1-D, got shape {tuple(x.shape)}")
    if x.numel() == 0:
        raise InvalidInputError("Waveform is empty")
    if not torch.isfinite(x).all():
        raise InvalidInputError("Waveform contains NaN or inf samples")
    if x.numel() < cfg.win_length:
        raise InvalidInputError(
            f"Waveform has {x.numel()} samples, shorter than one {cfg.win_length}-sample window"
        )

    n_frames = x.numel() // cfg.hop_length
    with torch.no_grad():
        mel = _mel_transform(cfg)(x)[:, :n_frames]
        values = torch.log(mel + cfg.log_floor)
    return LogMelSpectrogram(values=values, config=cfg)


class RunningMoments:
    """
    Mergeable mean / sum-of-squared-deviations accumulator (float64).

    Partial accumulators built on different shards can be merged, so corpus
    statistics may be computed in parallel.
    """

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.frames = 0

    def update(self, values: torch.Tensor, n_frames: int) -> None:
        v = values.detach().to(torch.float64)
        n = v.numel()
        m = v.mean().item()
        m2 = ((v - m) ** 2).sum().item()
        self._combine(n, m, m2, n_frames)

    def merge(self, other: "RunningMoments") -> None:
        if other.count:
            self._combine(other.count, other.mean, other.m2, other.frames)

    def _combine(self, n: int, mean: float, m2: float, frames: int) -> None:
        total = self.count + n
        delta = mean - self.mean
        self.mean += delta * n / total
        self.m2 += m2 + delta * delta * self.count * n / total
        self.count = total
        self.frames += frames


def compute_dataset_stats(
    corpus: Iterable[LogMelSpectrogram], corpus_id: str = "corpus"
) -> NormStats:
    """
    Compute a single mean/std pair over every value of every spectrogram.

    std uses the population convention, plus STD_EPSILON.

    Raises:
        InvalidInputError: if the corpus is empty
    """
    moments = RunningMoments()
    for spec in corpus:
        moments.update(spec.values, spec.n_frames)

    if moments.count == 0:
        raise InvalidInputError("Cannot compute statistics of an empty corpus")

    std = math.sqrt(moments.m2 / moments.count) + STD_EPSILON
    return NormStats(
        mean=moments.mean, std=std, corpus_id=corpus_id, n_frames_seen=moments.frames
    )


def normalize(spec: LogMelSpectrogram, stats: NormStats) -> LogMelSpectrogram:
    """Standardize a spectrogram with dataset statistics."""
    if spec.normalized:
        raise InvalidInputError(
            f"Spectrogram is already normalized with stats {spec.stats_id!r}"
        )
    return LogMelSpectrogram(
        values=(spec.values - stats.mean) / stats.std,
        config=spec.config,
        normalized=True,
        stats_id=stats.stats_id,
    )


def denormalize(spec: LogMelSpectrogram, stats: NormStats) -> LogMelSpectrogram:
    """Undo normalize() with the same statistics."""
    if not spec.normalized:
        raise InvalidInputError("Spectrogram is not normalized")
    if spec.stats_id != stats.stats_id:
        raise InvalidInputError(
            f"Spectrogram was normalized with {spec.stats_id!r}, not {stats.stats_id!r}"
        )
    return LogMelSpectrogram(values=spec.values * stats.std + stats.mean, config=spec.config)


def crop_frames(
    spec: LogMelSpectrogram, n_frames: int, rng: np.random.Generator
) -> tuple[LogMelSpectrogram, int]:
    """
    Randomly crop n_frames frames from a spectrogram.

    Clips shorter than n_frames are loop-padded: the crop starts at a random
    frame and wraps around the clip as many times as needed.

    Returns:
        (segment, offset) where offset is the first frame taken
    """
    if n_frames < 1:
        raise InvalidInputError(f"Crop length must be >= 1, got {n_frames}")

    total = spec.n_frames
    if total >= n_frames:
        offset = int(rng.integers(0, total - n_frames + 1))
        values = spec.values[:, offset : offset + n_frames]
    else:
        offset = int(rng.integers(0, total))
        reps = -(-(offset + n_frames) // total)
        values = spec.values.repeat(1, reps)[:, offset : offset + n_frames]

    return (
        LogMelSpectrogram(
            values=values.clone(),
            config=spec.config,
            normalized=spec.normalized,
            stats_id=spec.stats_id,
        ),
        offset,
    )


def sample_noise_segment(
    noise_corpus: Sequence[LogMelSpectrogram],
    duration_frames: int,
    rng: np.random.Generator,
) -> LogMelSpectrogram:
    """
    Pick a noise clip uniformly at random and crop a random segment from it.

    Raises:
        InvalidInputError: if the noise corpus is empty
    """
    if len(noise_corpus) == 0:
        raise InvalidInputError("Noise corpus is empty")
    clip = noise_corpus[int(rng.integers(0, len(noise_corpus)))]
    segment, _ = crop_frames(clip, duration_frames, rng)
    return segment


def mix_noisy(
    speech: LogMelSpectrogram, noise: LogMelSpectrogram, alpha: float
) -> LogMelSpectrogram:
    """
    Mix speech and noise at noise ratio alpha in the mel energy domain.

    out = log(alpha * exp(noise) + (1 - alpha) * exp(speech)), elementwise.
    Because the frontend computes log(energy + log_floor), exp() is its exact
    inverse and the mixture equals the frontend's log of the mixed energies.

    Raises:
        ShapeMismatchError: if the shapes or frontend configs differ
        InvalidInputError: if alpha is outside [0, 1] or an input is normalized
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0, 1], got {alpha}")
    if speech.values.shape != noise.values.shape:
        raise ShapeMismatchError(
            f"Speech {tuple(speech.values.shape)} and noise "
            f"{tuple(noise.values.shape)} shapes differ"
        )
    if speech.config != noise.config:
        raise ShapeMismatchError("Speech and noise were computed with different frontends")
    if speech.normalized or noise.normalized:
        raise InvalidInputError("Mixing must happen before statistics normalization")

    s = speech.values.to(torch.float64)
    n = noise.values.to(torch.float64)
    if alpha == 0.0:
        mixed = s
    elif alpha == 1.0:
        mixed = n
    else:
        mixed = torch.logaddexp(n + math.log(alpha), s + math.log1p(-alpha))

    return LogMelSpectrogram(values=mixed.to(speech.values.dtype), config=speech.config)


def load_waveform(path: Path, cfg: FrontendConfig | None = None) -> np.ndarray:
    """
    Read a mono PCM file (16-bit or float).

    Raises:
        FileNotFoundError: if the file does not exist
        InvalidInputError: if the file is multi-channel or not at cfg.sample_rate
    """
    cfg = cfg or FrontendConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Audio file not found: {path}")

    data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    if data.shape[1] != 1:
        raise InvalidInputError(f"{path.name}: expected mono audio, got {data.shape[1]} channels")
    if sr != cfg.sample_rate:
        raise InvalidInputError(
            f"{path.name}: expected {cfg.sample_rate} Hz audio, got {sr} Hz (no resampling)"
        )
    return data[:, 0]


def write_waveform(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write mono audio as 16-bit PCM WAV."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.asarray(waveform, dtype=np.float32), sample_rate, subtype="PCM_16")


# Feature archives: features.npz holds one frame-major [n_frames, dim] array per
# clip, manifest.txt lists "clip_id n_frames", stats.txt is optional.
ARCHIVE_FEATURES = "features.npz"
ARCHIVE_MANIFEST = "manifest.txt"
ARCHIVE_STATS = "stats.txt"


def save_feature_archive(
    directory: Path,
    features: Mapping[str, LogMelSpectrogram | np.ndarray | torch.Tensor],
    stats: NormStats | None = None,
) -> Path:
    """
    Write a feature archive.

    Spectrograms are stored transposed (frame-major) so every entry has the
    layout [n_frames, dim].

    Args:
        directory: Output directory (created if missing)
        features: clip id -> spectrogram or frame-major array
        stats: Optional statistics written to stats.txt

    Returns:
        Path to the archive directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    for clip_id, item in features.items():
        if not clip_id or any(c.isspace() for c in clip_id):
            raise InvalidInputError(f"Clip ids must be non-empty without spaces: {clip_id!r}")
        if isinstance(item, LogMelSpectrogram):
            array = item.values.T.numpy()
        else:
            array = np.asarray(item)
        if array.ndim != 2:
            raise ShapeMismatchError(f"{clip_id}: archive entries must be 2-D")
        arrays[clip_id] = array.astype(np.float32)

    np.savez(directory / ARCHIVE_FEATURES, **arrays)
    lines = [f"{clip_id} {array.shape[0]}" for clip_id, array in arrays.items()]
    (directory / ARCHIVE_MANIFEST).write_text("\n".join(lines) + "\n")
    if stats is not None:
        stats.save(directory / ARCHIVE_STATS)
    return directory


def load_feature_archive(directory: Path) -> dict[str, np.ndarray]:
    """
    Read a feature archive written by save_feature_archive().

    Raises:
        FileNotFoundError: if the archive files are missing
        InvalidInputError: if the manifest disagrees with the stored arrays
    """
    directory = Path(directory)
    manifest_path = directory / ARCHIVE_MANIFEST
    features_path = directory / ARCHIVE_FEATURES
    for path in (manifest_path, features_path):
        if not path.exists():
            raise FileNotFoundError(f"Feature archive file not found: {path}")

    result: dict[str, np.ndarray] = {}
    with np.load(features_path) as data:
        for line in manifest_path.read_text().splitlines():
            if not line.strip():
                continue
            clip_id, n_frames = line.split()
            if clip_id not in data:
                raise InvalidInputError(f"Manifest lists {clip_id} but the archive lacks it")
            array = data[clip_id]
            if array.shape[0] != int(n_frames):
                raise InvalidInputError(
                    f"{clip_id}: manifest says {n_frames} frames, archive has {array.shape[0]}"
                )
            result[clip_id] = array
    return result
