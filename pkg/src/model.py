"""
Transformer encoder, predictor and the online/target network pair.

The online network holds the encoder f, the predictor g, the learnable mask
token m and the projection into teacher-feature space. The target network is
an encoder-only copy moved towards the online encoder by EMA.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn as nn
from einops import rearrange

from .errors import ConfigError, ShapeMismatchError
from .objectives import stride_ratio
from .patching import (
    MaskBatch,
    MaskPlan,
    PatchConfig,
    PositionalEncoding,
    as_mask_batch,
    gather_tokens,
    scatter_tokens,
)

if TYPE_CHECKING:
    from .teachers import Teacher

logger = logging.getLogger(__name__)

INIT_STD = 0.02

PRESETS: dict[str, dict] = {
    "tiny": {"depth": 4, "embed_dim": 64, "n_heads": 4},
    "base": {"depth": 12, "embed_dim": 768, "n_heads": 12},
}

PREDICTOR_KINDS = ("transformer", "mlp")


@dataclass(frozen=True)
class EncoderConfig:
    """
    Encoder and predictor shapes.

    The default is the "tiny" preset; "base" mirrors ViT-Base.
    """

    depth: int = 4
    embed_dim: int = 64
    n_heads: int = 4
    mlp_ratio: float = 4.0
    predictor: str = "transformer"
    predictor_depth: int = 2
    preset: str = "tiny"

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"Encoder depth must be >= 1, got {self.depth}")
        if self.n_heads < 1 or self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.embed_dim % 4 != 0:
            raise ConfigError(f"embed_dim must be a multiple of 4, got {self.embed_dim}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.predictor not in PREDICTOR_KINDS:
            raise ConfigError(
                f"Unknown predictor '{self.predictor}', expected one of {PREDICTOR_KINDS}"
            )
        if self.predictor == "transformer" and self.predictor_depth < 1:
            raise ConfigError("A transformer predictor needs at least one layer")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "EncoderConfig":
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset '{name}', expected one of {sorted(PRESETS)}")
        values = {**PRESETS[name], "preset": name}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class EmaConfig:
    """Target decay rate; optionally raised from tau to tau_end on a cosine."""

    tau: float = 0.996
    tau_end: Optional[float] = None
    schedule: str = "constant"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.tau_end is not None and not 0.0 <= self.tau_end <= 1.0:
            raise ConfigError(f"tau_end must be in [0, 1], got {self.tau_end}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"Unknown EMA schedule '{self.schedule}'")
        if self.schedule == "cosine" and self.tau_end is None:
            raise ConfigError("The cosine EMA schedule needs tau_end")

    def tau_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 0:
            return self.tau
        progress = min(max(step / total_steps, 0.0), 1.0)
        cosine = (1.0 + math.cos(math.pi * progress)) / 2.0
        return self.tau_end - (self.tau_end - self.tau) * cosine


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = map(
            lambda t: rearrange(t, "b n (h d) -> b h n d", h=self.heads),
            self.to_qkv(x).chunk(3, dim=-1),
        )
        attn = (torch.matmul(q, k.transpose(-1, -2)) * self.scale).softmax(dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    """Blocks followed by a final LayerNorm; optionally exposes every layer."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(
        self, x: torch.Tensor, want_all_layers: bool = False
    ) -> tuple[torch.Tensor, Optional[tuple[torch.Tensor, ...]]]:
        hidden = [x] if want_all_layers else None
        for block in self.blocks:
            x = block(x)
            if hidden is not None:
                hidden.append(x)
        x = self.norm(x)
        if hidden is not None:
            # The last stack entry is the normed output so probes see what f emits.
            hidden[-1] = x
            return x, tuple(hidden)
        return x, None


class Encoder(nn.Module):
    """Patch embedding plus transformer stack (f)."""

    def __init__(self, cfg: EncoderConfig, patch_len: int):
        super().__init__()
        self.embed_dim = cfg.embed_dim
        self.depth = cfg.depth
        self.patch_embed = nn.Linear(patch_len, cfg.embed_dim)
        self.transformer = TransformerStack(cfg.embed_dim, cfg.depth, cfg.n_heads, cfg.mlp_hidden)

    def forward(self, tokens: torch.Tensor, want_all_layers: bool = False):
        return self.transformer(tokens, want_all_layers)


class Predictor(nn.Module):
    """Shallow transformer (or per-token MLP) predictor (g) of width d."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.kind = cfg.predictor
        if cfg.predictor == "transformer":
            self.body = TransformerStack(
                cfg.embed_dim, cfg.predictor_depth, cfg.n_heads, cfg.mlp_hidden
            )
        else:
            self.body = nn.Sequential(nn.LayerNorm(cfg.embed_dim), MLP(cfg.embed_dim, cfg.mlp_hidden))
        self.head = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "transformer":
            x, _ = self.body(x)
        else:
            x = self.body(x)
        return self.head(x)


class OnlineNetwork(nn.Module):
    """Trainable parameters theta: encoder, predictor, mask token and projection."""

    def __init__(
        self,
        cfg: EncoderConfig,
        patch_cfg: PatchConfig,
        n_mels: int,
        teacher_dim: Optional[int] = None,
    ):
        super().__init__()
        self.encoder = Encoder(cfg, patch_cfg.patch_len)
        self.predictor = Predictor(cfg)
        self.mask_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        n_freq = patch_cfg.n_freq_patches(n_mels)
        self.projection = (
            nn.Linear(n_freq * cfg.embed_dim, teacher_dim) if teacher_dim else None
        )


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


@dataclass
class ModelState:
    """Online network, EMA target encoder, frozen teacher and the step counter."""

    online: OnlineNetwork
    target: Encoder
    teacher: Optional["Teacher"]
    encoder_cfg: EncoderConfig
    patch_cfg: PatchConfig
    n_mels: int
    seed: int = 0
    step: int = 0

    @property
    def embed_dim(self) -> int:
        return self.encoder_cfg.embed_dim


def init_model(
    enc_cfg: EncoderConfig,
    patch_cfg: PatchConfig,
    teacher: Optional["Teacher"] = None,
    seed: int = 0,
    n_mels: int = 80,
    hop_ms: float = 10.0,
    dtype: torch.dtype = torch.float32,
) -> ModelState:
    """
    Build theta, copy its encoder into xi and freeze the teacher.

    Linear weights are truncated-normal (std 0.02), biases zero, LayerNorms
    identity, the mask token truncated-normal. Initialization runs under a
    forked RNG seeded with `seed`, so the global torch RNG is untouched.

    Args:
        enc_cfg: Encoder/predictor shapes
        patch_cfg: Patch size; its embed_dim must equal enc_cfg.embed_dim
        teacher: Frozen offline network, or None when distillation is off
        seed: Initialization seed
        n_mels: Input frequency bins
        hop_ms: Frontend hop, used to check teacher/patch stride compatibility

    Raises:
        ConfigError: on inconsistent widths or incompatible teacher strides
    """
    if patch_cfg.embed_dim != enc_cfg.embed_dim:
        raise ConfigError(
            f"Patch embed_dim {patch_cfg.embed_dim} differs from encoder embed_dim {enc_cfg.embed_dim}"
        )
    teacher_dim = None
    if teacher is not None:
        if teacher.feature_dim < 1:
            raise ConfigError(f"Teacher '{teacher.name}' declares feature_dim {teacher.feature_dim}")
        stride_ratio(patch_cfg.patch_time * hop_ms, teacher.frame_stride_ms)
        teacher_dim = teacher.feature_dim

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        online = OnlineNetwork(enc_cfg, patch_cfg, n_mels, teacher_dim)
        online.apply(_init_weights)
        nn.init.trunc_normal_(online.mask_token, std=INIT_STD)
    online = online.to(dtype)

    target = copy.deepcopy(online.encoder)
    target.requires_grad_(False)

    if teacher is not None:
        teacher.requires_grad_(False)
        teacher.eval()

    logger.debug(
        "Initialized %s encoder with %d parameters (seed %d)",
        enc_cfg.preset, count_parameters(online), seed,
    )
    return ModelState(
        online=online,
        target=target,
        teacher=teacher,
        encoder_cfg=enc_cfg,
        patch_cfg=patch_cfg,
        n_mels=n_mels,
        seed=seed,
    )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class EncoderOutput:
    final: torch.Tensor
    layers: Optional[tuple[torch.Tensor, ...]] = None


def encoder_forward(
    encoder: Encoder, tokens: torch.Tensor, want_all_layers: bool = False
) -> EncoderOutput:
    """
    Run f over already-embedded tokens.

    Args:
        encoder: Online or target encoder
        tokens: [N, d] or [B, N, d]
        want_all_layers: Also return depth + 1 per-layer outputs
            (index 0 is the embedding input)

    Raises:
        ShapeMismatchError: if the token width is not d
    """
    if tokens.shape[-1] != encoder.embed_dim:
        raise ShapeMismatchError(
            f"Token width {tokens.shape[-1]} does not match encoder width {encoder.embed_dim}"
        )
    unbatched = tokens.ndim == 2
    x = tokens.unsqueeze(0) if unbatched else tokens
    final, layers = encoder(x, want_all_layers)
    if unbatched:
        final = final[0]
        layers = tuple(layer[0] for layer in layers) if layers is not None else None
    return EncoderOutput(final=final, layers=layers)


def predictor_forward(
    online: OnlineNetwork,
    z_v: torch.Tensor,
    plan: MaskPlan | MaskBatch,
    pos: PositionalEncoding,
) -> torch.Tensor:
    """
    z_hat = g(concat(z_v, m) + p), returned at the masked positions only.

    z_v rows go back to their visible indices, mask-token copies fill the
    masked indices, the positional table is added by original index and the
    predictor output is gathered in masked_idx order.

    Args:
        online: Network holding g and m
        z_v: [Nv, d] with a MaskPlan or [B, Nv, d] with a MaskBatch
        plan: The partition used to build z_v
        pos: Positional table covering all N tokens

    Returns:
        [Nm, d] (or [B, Nm, d])

    Raises:
        ShapeMismatchError: if z_v or pos do not match the plan
    """
    unbatched = isinstance(plan, MaskPlan)
    masks = as_mask_batch(plan)
    visible = z_v.unsqueeze(0) if unbatched else z_v
    if visible.shape[1] != masks.visible_index.shape[1]:
        raise ShapeMismatchError(
            f"{visible.shape[1]} visible tokens but the plan has {masks.visible_index.shape[1]}"
        )
    if pos.n_patches != masks.n_patches:
        raise ShapeMismatchError(
            f"Positional table has {pos.n_patches} rows but the plan covers {masks.n_patches}"
        )

    batch, n_masked = visible.shape[0], masks.masked_index.shape[1]
    mask_tokens = online.mask_token.to(visible.dtype).expand(batch, n_masked, -1)
    full = scatter_tokens(visible, mask_tokens, masks) + pos.table.to(visible.dtype)
    predicted = gather_tokens(online.predictor(full), masks.masked_index)
    return predicted[0] if unbatched else predicted


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, tau: float) -> nn.Module:
    """
    xi <- tau * xi + (1 - tau) * theta, in place on every target parameter.

    Raises:
        ShapeMismatchError: if the two parameter sets differ in names or shapes
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    target_params = dict(target.named_parameters())
    online_params = dict(online.named_parameters())
    if target_params.keys() != online_params.keys():
        raise ShapeMismatchError("Target and online parameter names differ")
    for name, p_target in target_params.items():
        p_online = online_params[name]
        if p_target.shape != p_online.shape:
            raise ShapeMismatchError(
                f"Parameter {name}: target {tuple(p_target.shape)} vs online {tuple(p_online.shape)}"
            )
        if tau == 1.0:
            continue
        if tau == 0.0:
            p_target.copy_(p_online)
        else:
            p_target.mul_(tau).add_(p_online, alpha=1.0 - tau)
    return target


def parameter_groups(online: OnlineNetwork, weight_decay: float) -> list[dict]:
    """AdamW groups: matrices decay; biases, norms and the mask token do not."""
    decay, no_decay = [], []
    for name, param in online.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or name == "mask_token":
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
