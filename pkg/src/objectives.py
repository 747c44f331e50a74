"""
Training objectives.

Masked-prediction loss against standardized target-encoder outputs, the
per-frame reassembly of encoder outputs for distillation, teacher frame
alignment, the distillation loss and their weighted combination.

Both losses are the mean over rows of 2 - 2 * cos(a, b).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, InvalidInputError, ShapeMismatchError
from .patching import MaskBatch, MaskPlan, as_mask_batch, scatter_tokens


@dataclass(frozen=True)
class ObjectiveConfig:
    """Loss weights and numerical guards."""

    lambda_m2d: float = 1.0
    lambda_off: float = 1.0
    standardize_eps: float = 1e-5
    l2_eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.lambda_m2d < 0 or self.lambda_off < 0:
            raise ConfigError(
                f"Loss weights must be >= 0, got lambda_m2d={self.lambda_m2d}, "
                f"lambda_off={self.lambda_off}"
            )
        if self.lambda_m2d == 0 and self.lambda_off == 0:
            raise ConfigError("lambda_m2d and lambda_off cannot both be zero")


@dataclass
class MaskedPredictionBatch:
    """Online predictions and (standardized) target outputs, aligned by masked index."""

    z_hat_m: torch.Tensor
    z_m: torch.Tensor
    z_tilde_m: torch.Tensor

    def __post_init__(self) -> None:
        if not (self.z_hat_m.shape == self.z_m.shape == self.z_tilde_m.shape):
            raise ShapeMismatchError("Prediction and target rows are not aligned")

    @classmethod
    def from_target(
        cls, z_hat_m: torch.Tensor, z_m: torch.Tensor, eps: float = 1e-5
    ) -> "MaskedPredictionBatch":
        """Pair predictions with the target outputs and their standardized form."""
        return cls(z_hat_m=z_hat_m, z_m=z_m, z_tilde_m=standardize_target(z_m, eps))


@dataclass
class FrameFeatures:
    """Teacher features h and student predictions h_hat after alignment."""

    h: torch.Tensor
    h_hat: torch.Tensor

    def __post_init__(self) -> None:
        if self.h.shape != self.h_hat.shape:
            raise ShapeMismatchError(
                f"Teacher {tuple(self.h.shape)} and prediction {tuple(self.h_hat.shape)} differ"
            )


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss values and the weights that combined them."""

    l_m2d: float
    l_off: float
    l_total: float
    lambda_m2d: float
    lambda_off: float


def standardize_target(z_m: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """
    Per-row standardization over the feature dimension (no affine).

    Each d-vector gets zero mean and unit population variance; eps sits inside
    the square root so constant rows map to zeros.
    """
    if z_m.ndim < 1 or z_m.numel() == 0:
        raise InvalidInputError("standardize_target needs at least one row")
    mean = z_m.mean(dim=-1, keepdim=True)
    var = z_m.var(dim=-1, unbiased=False, keepdim=True)
    return (z_m - mean) / torch.sqrt(var + eps)


def normalized_mse(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """
    Per-row ||l2(a) - l2(b)||^2 = 2 - 2 * cos(a, b), shape a.shape[:-1].

    A zero-norm row is treated as orthogonal (contribution 2).
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    a_unit = F.normalize(a, dim=-1, eps=eps)
    b_unit = F.normalize(b, dim=-1, eps=eps)
    return 2.0 - 2.0 * (a_unit * b_unit).sum(dim=-1)


def loss_m2d(z_hat_m: torch.Tensor, z_tilde_m: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Masked-prediction loss; gradient reaches z_hat_m only."""
    if z_hat_m.numel() == 0:
        raise InvalidInputError("loss_m2d needs at least one masked row")
    return normalized_mse(z_hat_m, z_tilde_m.detach(), eps).mean()


def reassemble_frame_order(
    z_v: torch.Tensor,
    z_hat_m: torch.Tensor,
    plan: MaskPlan | MaskBatch,
    grid: tuple[int, int],
) -> torch.Tensor:
    """
    Rebuild the full token sequence and concatenate frequency patches per frame.

    Visible slots take z_v rows, masked slots take z_hat_m rows; every time
    index t then yields [feat(f0, t), feat(f1, t), ...].

    Args:
        z_v: [Nv, d] (or [B, Nv, d] with a MaskBatch)
        z_hat_m: [Nm, d] (or [B, Nm, d])
        plan: The partition that produced z_v / z_hat_m
        grid: (nF, nT)

    Returns:
        [nT, nF * d] (or [B, nT, nF * d])

    Raises:
        ShapeMismatchError: if Nv + Nm != nF * nT
    """
    n_freq, n_time = grid
    unbatched = isinstance(plan, MaskPlan)
    masks = as_mask_batch(plan)
    visible = z_v.unsqueeze(0) if unbatched else z_v
    masked = z_hat_m.unsqueeze(0) if unbatched else z_hat_m

    if visible.shape[1] + masked.shape[1] != n_freq * n_time or masks.n_patches != n_freq * n_time:
        raise ShapeMismatchError(
            f"{visible.shape[1]} visible + {masked.shape[1]} masked rows do not fill "
            f"a {n_freq}x{n_time} grid"
        )

    full = scatter_tokens(visible, masked, masks)
    frames = rearrange(full, "b (nt nf) d -> b nt (nf d)", nf=n_freq, nt=n_time)
    return frames[0] if unbatched else frames


def stride_ratio(patch_stride_ms: float, teacher_stride_ms: float) -> tuple[str, int]:
    """
    Classify two frame strides.

    Returns:
        ("pool", k) if patch stride = k * teacher stride (k >= 1),
        ("repeat", k) if teacher stride = k * patch stride (k > 1)

    Raises:
        ConfigError: for non-positive strides or a non-integer ratio
    """
    if patch_stride_ms <= 0 or teacher_stride_ms <= 0:
        raise ConfigError("Frame strides must be positive")
    down = patch_stride_ms / teacher_stride_ms
    if abs(down - round(down)) < 1e-9 and round(down) >= 1:
        return "pool", int(round(down))
    up = teacher_stride_ms / patch_stride_ms
    if abs(up - round(up)) < 1e-9:
        return "repeat", int(round(up))
    raise ConfigError(
        f"Patch stride {patch_stride_ms} ms and teacher stride {teacher_stride_ms} ms "
        "are not integer multiples of each other"
    )


def align_teacher(
    h: torch.Tensor, patch_time_stride_ms: float, teacher_stride_ms: float
) -> torch.Tensor:
    """
    Resample teacher frames [..., T_h, D] to the patch frame rate.

    Block mean of k frames when the patch stride is k times longer, each frame
    repeated k times when it is k times shorter. A trailing remainder that does
    not fill a block is dropped.
    """
    mode, k = stride_ratio(patch_time_stride_ms, teacher_stride_ms)
    if k == 1:
        return h
    if mode == "repeat":
        return h.repeat_interleave(k, dim=-2)
    n_blocks = h.shape[-2] // k
    if n_blocks < 1:
        raise InvalidInputError(f"{h.shape[-2]} teacher frames do not fill one block of {k}")
    covered = h[..., : n_blocks * k, :]
    return rearrange(covered, "... (t k) d -> ... t k d", k=k).mean(dim=-2)


def crop_to_common(h: torch.Tensor, h_hat: torch.Tensor) -> FrameFeatures:
    """Drop trailing frames so teacher and student sequences have the same length."""
    n = min(h.shape[-2], h_hat.shape[-2])
    return FrameFeatures(h=h[..., :n, :], h_hat=h_hat[..., :n, :])


def loss_off(h: torch.Tensor, h_hat: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Distillation loss over aligned frames; gradient reaches h_hat only."""
    if h_hat.numel() == 0:
        raise InvalidInputError("loss_off needs at least one frame")
    return normalized_mse(h_hat, h.detach(), eps).mean()


def combine_losses(cfg: ObjectiveConfig, l_m2d, l_off):
    """lambda_m2d * l_m2d + lambda_off * l_off; a zero-weighted term is skipped entirely."""
    total = 0.0
    if cfg.lambda_m2d > 0:
        total = total + cfg.lambda_m2d * l_m2d
    if cfg.lambda_off > 0:
        total = total + cfg.lambda_off * l_off
    return total


def loss_total(cfg: ObjectiveConfig, l_m2d: float, l_off: float) -> LossBreakdown:
    """Record the weighted combination of the two losses."""
    l_m2d, l_off = float(l_m2d), float(l_off)
    return LossBreakdown(
        l_m2d=l_m2d,
        l_off=l_off,
        l_total=float(combine_losses(cfg, l_m2d, l_off)),
        lambda_m2d=cfg.lambda_m2d,
        lambda_off=cfg.lambda_off,
    )
