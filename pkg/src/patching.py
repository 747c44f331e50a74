"""
Patch splitting, positional encoding and random masking.

Token order is time-major with frequency varying fastest: token index
i = t * n_freq_patches + f. Every patch is flattened as (patch_freq, patch_time)
row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from einops import rearrange

from .errors import ConfigError, InvalidInputError, ShapeMismatchError
from .frontend import LogMelSpectrogram

DEFAULT_MASK_RATIO = 0.6


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry (frequency bins x frames) and token width."""

    patch_freq: int = 80
    patch_time: int = 4
    embed_dim: int = 64

    def __post_init__(self) -> None:
        if self.patch_freq < 1 or self.patch_time < 1:
            raise ConfigError(
                f"Patch sizes must be >= 1, got {self.patch_freq}x{self.patch_time}"
            )
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def patch_len(self) -> int:
        return self.patch_freq * self.patch_time

    def n_freq_patches(self, n_mels: int) -> int:
        if n_mels % self.patch_freq != 0:
            raise ConfigError(
                f"{n_mels} mel bins are not divisible by patch_freq={self.patch_freq}"
            )
        return n_mels // self.patch_freq

    def grid_shape(self, n_mels: int, n_frames: int) -> tuple[int, int]:
        """(nF, nT) for a spectrogram; trailing frames that do not fill a patch are dropped."""
        n_time = n_frames // self.patch_time
        if n_time < 1:
            raise InvalidInputError(
                f"{n_frames} frames do not fill one {self.patch_time}-frame patch"
            )
        return self.n_freq_patches(n_mels), n_time


@dataclass
class PatchGrid:
    """Flattened patches of one spectrogram in time-major order."""

    n_freq_patches: int
    n_time_patches: int
    patch_freq: int
    patch_time: int
    patches: torch.Tensor  # [nF * nT, patch_freq * patch_time]

    def __post_init__(self) -> None:
        expected = (self.n_freq_patches * self.n_time_patches, self.patch_freq * self.patch_time)
        if tuple(self.patches.shape) != expected:
            raise ShapeMismatchError(
                f"Patch tensor has shape {tuple(self.patches.shape)}, expected {expected}"
            )

    @property
    def n_patches(self) -> int:
        return self.n_freq_patches * self.n_time_patches


def patchify_tensor(values: torch.Tensor, patch_freq: int, patch_time: int) -> torch.Tensor:
    """
    Split [..., F, T] into [..., nT * nF, patch_freq * patch_time].

    Trailing frames that do not fill a patch are dropped.
    """
    n_mels, n_frames = values.shape[-2:]
    if n_mels % patch_freq != 0:
        raise ConfigError(f"{n_mels} mel bins are not divisible by patch_freq={patch_freq}")
    n_time = n_frames // patch_time
    if n_time < 1:
        raise InvalidInputError(f"{n_frames} frames do not fill one {patch_time}-frame patch")
    covered = values[..., : n_time * patch_time]
    return rearrange(
        covered, "... (nf pf) (nt pt) -> ... (nt nf) (pf pt)", pf=patch_freq, pt=patch_time
    )


def unpatchify_tensor(
    patches: torch.Tensor, n_freq_patches: int, patch_freq: int, patch_time: int
) -> torch.Tensor:
    """Inverse of patchify_tensor on the covered region."""
    return rearrange(
        patches,
        "... (nt nf) (pf pt) -> ... (nf pf) (nt pt)",
        nf=n_freq_patches,
        pf=patch_freq,
        pt=patch_time,
    )


def patchify(spec: LogMelSpectrogram, cfg: PatchConfig) -> PatchGrid:
    """
    Split a spectrogram into non-overlapping patch_freq x patch_time patches.

    Args:
        spec: Input spectrogram [n_mels, n_frames]
        cfg: Patch geometry

    Returns:
        PatchGrid with nF = n_mels / patch_freq, nT = floor(n_frames / patch_time)

    Raises:
        ConfigError: if n_mels is not divisible by patch_freq
        InvalidInputError: if there are fewer frames than one patch
    """
    n_freq, n_time = cfg.grid_shape(spec.n_mels, spec.n_frames)
    return PatchGrid(
        n_freq_patches=n_freq,
        n_time_patches=n_time,
        patch_freq=cfg.patch_freq,
        patch_time=cfg.patch_time,
        patches=patchify_tensor(spec.values, cfg.patch_freq, cfg.patch_time),
    )


def unpatchify(grid: PatchGrid) -> torch.Tensor:
    """Rebuild the covered [n_mels, nT * patch_time] region of the spectrogram."""
    return unpatchify_tensor(grid.patches, grid.n_freq_patches, grid.patch_freq, grid.patch_time)


@dataclass(frozen=True)
class MaskPlan:
    """
    Visible/masked partition of N patches.

    Index lists are stored sorted whatever order they were given in.
    """

    ratio: float
    visible_idx: tuple[int, ...]
    masked_idx: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        visible = tuple(sorted(int(i) for i in self.visible_idx))
        masked = tuple(sorted(int(i) for i in self.masked_idx))
        object.__setattr__(self, "visible_idx", visible)
        object.__setattr__(self, "masked_idx", masked)

        n = len(visible) + len(masked)
        if sorted(visible + masked) != list(range(n)):
            raise InvalidInputError(
                "visible and masked indices must be disjoint and cover 0..N-1"
            )

    @property
    def n_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def mask_count(n_patches: int, ratio: float) -> int:
    """round(ratio * N) with halves rounded up."""
    return int(math.floor(ratio * n_patches + 0.5 + 1e-9))


def mask_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample mask generator seeded from (global seed, epoch, sample index)."""
    return np.random.default_rng([seed, epoch, index])


def sample_mask(
    n_patches: int,
    ratio: float = DEFAULT_MASK_RATIO,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> MaskPlan:
    """
    Draw a uniformly random visible/masked partition.

    Exactly round(ratio * n_patches) patches are masked, chosen as the head of
    a shuffled permutation.

    Args:
        n_patches: Number of patches N (>= 2)
        ratio: Masking ratio in (0, 1)
        rng: Random generator (created from seed when omitted)
        seed: Recorded in the plan; also seeds rng when rng is None

    Raises:
        InvalidInputError: for ratios outside (0, 1), N < 2, or plans with no
            masked or no visible patch
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"Masking ratio must be in (0, 1), got {ratio}")
    if n_patches < 2:
        raise InvalidInputError(f"Need at least 2 patches to mask, got {n_patches}")

    n_masked = mask_count(n_patches, ratio)
    if n_masked == 0 or n_masked == n_patches:
        raise InvalidInputError(
            f"Ratio {ratio} on {n_patches} patches masks {n_masked}: degenerate plan"
        )

    if rng is None:
        rng = np.random.default_rng(seed)
    order = rng.permutation(n_patches)
    return MaskPlan(
        ratio=ratio,
        visible_idx=tuple(order[n_masked:].tolist()),
        masked_idx=tuple(order[:n_masked].tolist()),
        seed=seed,
    )


@dataclass
class MaskBatch:
    """Index tensors for a batch of plans with equal visible/masked counts."""

    visible_index: torch.Tensor  # [B, Nv] int64
    masked_index: torch.Tensor  # [B, Nm] int64

    @classmethod
    def from_plans(cls, plans: Sequence[MaskPlan]) -> "MaskBatch":
        if not plans:
            raise InvalidInputError("Cannot batch an empty list of mask plans")
        sizes = {(len(p.visible_idx), len(p.masked_idx)) for p in plans}
        if len(sizes) != 1:
            raise ShapeMismatchError(f"Mask plans in a batch differ in size: {sorted(sizes)}")
        return cls(
            visible_index=torch.tensor([p.visible_idx for p in plans], dtype=torch.long),
            masked_index=torch.tensor([p.masked_idx for p in plans], dtype=torch.long),
        )

    @property
    def n_patches(self) -> int:
        return self.visible_index.shape[1] + self.masked_index.shape[1]


def as_mask_batch(plan: MaskPlan | MaskBatch) -> MaskBatch:
    return plan if isinstance(plan, MaskBatch) else MaskBatch.from_plans([plan])


def gather_tokens(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """tokens [B, N, d], index [B, K] -> [B, K, d]."""
    return torch.gather(tokens, 1, index.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def scatter_tokens(
    visible: torch.Tensor, masked: torch.Tensor, masks: MaskBatch
) -> torch.Tensor:
    """Place visible and masked tokens back at their original indices: [B, N, d]."""
    batch, _, dim = visible.shape
    if masked.shape[0] != batch or masked.shape[-1] != dim:
        raise ShapeMismatchError(
            f"Visible {tuple(visible.shape)} and masked {tuple(masked.shape)} tokens disagree"
        )
    if visible.shape[1] != masks.visible_index.shape[1] or masked.shape[1] != masks.masked_index.shape[1]:
        raise ShapeMismatchError("Token counts do not match the mask plan")

    full = visible.new_zeros(batch, masks.n_patches, dim)
    full = full.scatter(1, masks.visible_index.unsqueeze(-1).expand(-1, -1, dim), visible)
    full = full.scatter(1, masks.masked_index.unsqueeze(-1).expand(-1, -1, dim), masked)
    return full


@dataclass(frozen=True)
class PositionalEncoding:
    """Fixed 2-D sin-cos table, one row per token in time-major order."""

    n_freq_patches: int
    n_time_patches: int
    embed_dim: int
    table: torch.Tensor  # [N, embed_dim]

    @property
    def n_patches(self) -> int:
        return self.n_freq_patches * self.n_time_patches


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@lru_cache(maxsize=32)
def _sincos_2d(n_freq: int, n_time: int, dim: int) -> np.ndarray:
    time_pos, freq_pos = np.meshgrid(np.arange(n_time), np.arange(n_freq), indexing="ij")
    time_pos, freq_pos = time_pos.reshape(-1), freq_pos.reshape(-1)
    return np.concatenate(
        [_sincos_1d(dim // 2, freq_pos), _sincos_1d(dim // 2, time_pos)], axis=1
    )


def positional_encoding(
    n_freq_patches: int, n_time_patches: int, embed_dim: int, dtype: torch.dtype = torch.float32
) -> PositionalEncoding:
    """
    Build the fixed 2-D sin-cos positional table.

    Half of the channels encode the frequency-patch index, half the
    time-patch index. embed_dim must be a multiple of 4.
    """
    if embed_dim % 4 != 0:
        raise ConfigError(f"embed_dim must be a multiple of 4, got {embed_dim}")
    table = torch.tensor(_sincos_2d(n_freq_patches, n_time_patches, embed_dim), dtype=dtype)
    return PositionalEncoding(n_freq_patches, n_time_patches, embed_dim, table)


def embed_patches(
    patches: PatchGrid | torch.Tensor,
    patch_embed: torch.nn.Linear,
    pos: PositionalEncoding,
) -> torch.Tensor:
    """
    token_i = W @ patch_i + b + pos[i], order preserved.

    Accepts a PatchGrid or a patch tensor [..., N, patch_len].

    Raises:
        ShapeMismatchError: if the projection or table widths do not match
    """
    x = patches.patches if isinstance(patches, PatchGrid) else patches
    if patch_embed.in_features != x.shape[-1]:
        raise ShapeMismatchError(
            f"Patch length {x.shape[-1]} does not match embedding input {patch_embed.in_features}"
        )
    if patch_embed.out_features != pos.embed_dim:
        raise ShapeMismatchError(
            f"Embedding width {patch_embed.out_features} does not match positional width {pos.embed_dim}"
        )
    if x.shape[-2] != pos.n_patches:
        raise ShapeMismatchError(
            f"{x.shape[-2]} patches but the positional table has {pos.n_patches} rows"
        )
    table = pos.table.to(dtype=patch_embed.weight.dtype)
    return patch_embed(x) + table


def partition(
    tokens: torch.Tensor, plan: MaskPlan | MaskBatch
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Split tokens into visible tokens and masked positions.

    Args:
        tokens: [N, d] with a MaskPlan, or [B, N, d] with a MaskBatch
        plan: The partition

    Returns:
        (visible_tokens in ascending original index order, masked index tensor)

    Raises:
        ShapeMismatchError: if the token count differs from the plan's N
    """
    unbatched = isinstance(plan, MaskPlan)
    masks = as_mask_batch(plan)
    x = tokens.unsqueeze(0) if unbatched else tokens
    if x.shape[1] != masks.n_patches:
        raise ShapeMismatchError(f"{x.shape[1]} tokens but the plan covers {masks.n_patches}")
    visible = gather_tokens(x, masks.visible_index)
    if unbatched:
        return visible[0], masks.masked_index[0]
    return visible, masks.masked_index


def reassemble(
    visible: torch.Tensor, masked: torch.Tensor, plan: MaskPlan | MaskBatch
) -> torch.Tensor:
    """Inverse of partition: put visible and masked tokens back in index order."""
    if isinstance(plan, MaskPlan):
        return scatter_tokens(visible.unsqueeze(0), masked.unsqueeze(0), as_mask_batch(plan))[0]
    return scatter_tokens(visible, masked, plan)
