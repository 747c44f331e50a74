"""
Frozen offline teacher networks.

A teacher maps clean (normalized) log-mel batches [B, F, T] to features
[B, T_h, D] at its own frame stride. Teachers shipped here:

    meanpool[-k]   mean of k consecutive log-mel frames (default k=2, 20 ms)
    random         frozen randomly initialized tiny transformer
    archive:PATH   features exported by an external model into a feature archive
    none           no teacher (distillation disabled)
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .errors import ConfigError, InvalidInputError, ShapeMismatchError
from .frontend import FrontendConfig, LogMelSpectrogram, load_feature_archive, read_key_values
from .model import TransformerStack, _init_weights
from .patching import positional_encoding

logger = logging.getLogger(__name__)

TEACHER_INFO = "teacher.txt"
DEFAULT_POOL = 2


class Teacher(nn.Module):
    """Base class: a frozen feature extractor with a declared frame stride."""

    name: str = "teacher"
    frame_stride_ms: float = 20.0
    feature_dim: int = 0

    def forward(
        self,
        clean: torch.Tensor,
        clip_ids: Optional[Sequence[str]] = None,
        frame_offsets: Optional[Sequence[int]] = None,
    ) -> torch.Tensor:
        raise NotImplementedError


class MeanPoolTeacher(Teacher):
    """h_t = mean of k consecutive log-mel frames; trailing partial block dropped."""

    def __init__(self, n_mels: int = 80, k: int = DEFAULT_POOL, hop_ms: float = 10.0):
        super().__init__()
        if k < 1:
            raise ConfigError(f"Pooling width must be >= 1, got {k}")
        self.k = k
        self.name = f"meanpool-{k}"
        self.frame_stride_ms = k * hop_ms
        self.feature_dim = n_mels

    def forward(self, clean, clip_ids=None, frame_offsets=None):
        n_out = clean.shape[-1] // self.k
        if n_out < 1:
            raise InvalidInputError(f"{clean.shape[-1]} frames are fewer than one pooling block")
        covered = clean[..., : n_out * self.k]
        return rearrange(covered, "b f (t k) -> b t f k", k=self.k).mean(dim=-1)


class RandomEncoderTeacher(Teacher):
    """
    A frozen, randomly initialized tiny transformer.

    Groups of k frames are projected to `dim`, given a 1-D sin-cos position
    and run through `depth` blocks. Initialization is seeded and independent
    of the global RNG.
    """

    def __init__(
        self,
        n_mels: int = 80,
        k: int = DEFAULT_POOL,
        hop_ms: float = 10.0,
        dim: int = 64,
        depth: int = 2,
        heads: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        self.k = k
        self.dim = dim
        self.name = "random"
        self.frame_stride_ms = k * hop_ms
        self.feature_dim = dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(n_mels * k, dim)
            self.transformer = TransformerStack(dim, depth, heads, dim * 4)
            self.apply(_init_weights)

    def forward(self, clean, clip_ids=None, frame_offsets=None):
        n_out = clean.shape[-1] // self.k
        if n_out < 1:
            raise InvalidInputError(f"{clean.shape[-1]} frames are fewer than one frame group")
        grouped = rearrange(clean[..., : n_out * self.k], "b f (t k) -> b t (f k)", k=self.k)
        pos = positional_encoding(1, n_out, self.dim, dtype=grouped.dtype).table
        x = self.embed(grouped.to(self.embed.weight.dtype)) + pos.to(self.embed.weight.dtype)
        out, _ = self.transformer(x)
        return out


class ArchiveTeacher(Teacher):
    """
    Serves features exported by an external model.

    The archive directory holds a feature archive (one [n_frames, D] array per
    clip id) plus teacher.txt with `frame_stride_ms=...` and optionally
    `name=...`. Requests are answered by cropping the stored features at the
    offset of the speech crop; short clips wrap around like loop-padded crops.
    """

    def __init__(self, directory: Path, hop_ms: float = 10.0):
        super().__init__()
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"Teacher archive not found: {directory}")
        info_path = directory / TEACHER_INFO
        if not info_path.exists():
            raise FileNotFoundError(f"Teacher archive lacks {TEACHER_INFO}: {directory}")
        info = read_key_values(info_path)
        try:
            self.frame_stride_ms = float(info["frame_stride_ms"])
        except (KeyError, ValueError) as e:
            raise ConfigError(f"{info_path}: missing or invalid frame_stride_ms") from e

        self.features = {k: torch.from_numpy(v) for k, v in load_feature_archive(directory).items()}
        if not self.features:
            raise InvalidInputError(f"Teacher archive {directory} is empty")
        dims = {v.shape[1] for v in self.features.values()}
        if len(dims) != 1:
            raise ShapeMismatchError(f"Teacher archive mixes feature widths {sorted(dims)}")
        self.feature_dim = dims.pop()
        self.hop_ms = hop_ms
        self.name = info.get("name", f"archive:{directory.name}")

    def forward(self, clean, clip_ids=None, frame_offsets=None):
        if clip_ids is None or frame_offsets is None:
            raise InvalidInputError("Archive teachers need clip ids and crop offsets")
        if len(clip_ids) != clean.shape[0] or len(frame_offsets) != clean.shape[0]:
            raise ShapeMismatchError("One clip id and offset is needed per batch item")

        scale = self.hop_ms / self.frame_stride_ms
        n_out = int(np.floor(clean.shape[-1] * scale + 1e-9))
        rows = []
        for clip_id, offset in zip(clip_ids, frame_offsets):
            if clip_id not in self.features:
                raise InvalidInputError(f"Teacher archive has no features for clip {clip_id}")
            stored = self.features[clip_id]
            start = int(np.floor(offset * scale + 1e-9))
            index = torch.arange(start, start + n_out) % stored.shape[0]
            rows.append(stored[index])
        return torch.stack(rows).to(clean.dtype)


def build_teacher(
    spec: str, frontend: FrontendConfig | None = None, seed: int = 0
) -> Optional[Teacher]:
    """
    Build a frozen teacher from its CLI spelling.

    Args:
        spec: "meanpool", "meanpool-K", "random", "archive:PATH" or "none"
        frontend: Frontend the teacher input comes from
        seed: Seed for the random teacher

    Raises:
        ConfigError: for an unknown spelling
    """
    frontend = frontend or FrontendConfig()
    hop_ms = frontend.hop_ms
    if spec in ("none", ""):
        return None
    if spec == "meanpool":
        teacher = MeanPoolTeacher(frontend.n_mels, DEFAULT_POOL, hop_ms)
    elif spec.startswith("meanpool-"):
        try:
            k = int(spec.split("-", 1)[1])
        except ValueError as e:
            raise ConfigError(f"Invalid pooling width in teacher '{spec}'") from e
        teacher = MeanPoolTeacher(frontend.n_mels, k, hop_ms)
    elif spec == "random":
        teacher = RandomEncoderTeacher(frontend.n_mels, DEFAULT_POOL, hop_ms, seed=seed)
    elif spec.startswith("archive:"):
        teacher = ArchiveTeacher(Path(spec.split(":", 1)[1]), hop_ms)
    else:
        raise ConfigError(
            f"Unknown teacher '{spec}', expected meanpool[-k], random, archive:PATH or none"
        )

    teacher.requires_grad_(False)
    teacher.eval()
    logger.debug("Built teacher %s (stride %.1f ms, dim %d)", teacher.name, teacher.frame_stride_ms, teacher.feature_dim)
    return teacher


@torch.no_grad()
def teacher_forward(
    teacher: Teacher,
    clean: LogMelSpectrogram | torch.Tensor,
    clip_ids: Optional[Sequence[str]] = None,
    frame_offsets: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """
    Teacher features of CLEAN speech, one vector per teacher frame.

    Args:
        teacher: Frozen teacher
        clean: A spectrogram ([F, T] -> [T_h, D]) or a batch [B, F, T] -> [B, T_h, D]

    Raises:
        InvalidInputError: on malformed input
    """
    values = clean.values if isinstance(clean, LogMelSpectrogram) else clean
    unbatched = values.ndim == 2
    x = values.unsqueeze(0) if unbatched else values
    if x.ndim != 3:
        raise InvalidInputError(f"Teacher input must be [B, F, T], got {tuple(values.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("Teacher input contains NaN or inf")
    h = teacher(x, clip_ids, frame_offsets)
    return h[0] if unbatched else h
