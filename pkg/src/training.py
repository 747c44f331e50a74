"""
Joint masked-prediction / denoising-distillation pre-training.

Each step builds noisy inputs for the online/target pair and clean inputs for
the teacher, computes both losses, updates the online network with AdamW and
then moves the target encoder by EMA.

Random streams are pure functions of the seed:
    epoch order       (seed, epoch)
    crops and noise   (seed, epoch, step)
    masks             (seed, epoch, clip index)
so a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_module_state, save_checkpoint
from .corpus import LoadedCorpus
from .errors import CheckpointError, ConfigError, InvalidInputError, NonFiniteLossError
from .frontend import (
    FrontendConfig,
    LogMelSpectrogram,
    MixConfig,
    NormStats,
    compute_dataset_stats,
    crop_frames,
    mix_noisy,
    normalize,
    sample_noise_segment,
)
from .model import (
    EmaConfig,
    EncoderConfig,
    ModelState,
    encoder_forward,
    ema_update,
    init_model,
    parameter_groups,
    predictor_forward,
)
from .objectives import (
    LossBreakdown,
    MaskedPredictionBatch,
    ObjectiveConfig,
    align_teacher,
    combine_losses,
    crop_to_common,
    loss_m2d,
    loss_off,
    loss_total,
    reassemble_frame_order,
)
from .patching import (
    DEFAULT_MASK_RATIO,
    MaskBatch,
    PatchConfig,
    embed_patches,
    gather_tokens,
    mask_rng,
    partition,
    patchify_tensor,
    positional_encoding,
    sample_mask,
)
from .teachers import build_teacher, teacher_forward

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.txt"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.pt"

_ORDER_STREAM = 0
_BATCH_STREAM = 1
_STATS_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything a pre-training run depends on.

    Defaults are desk-scale: 3 warm-up epochs, AdamW (3e-4, wd 0.05,
    betas 0.9/0.95), 2.08 s inputs, alpha 0.2, masking ratio 0.6.
    """

    epochs: int = 10
    warmup_epochs: int = 3
    batch_size: int = 8
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    ema: EmaConfig = field(default_factory=EmaConfig)
    input_duration_s: float = 2.08
    alpha: float = 0.2
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    mask_ratio: float = DEFAULT_MASK_RATIO
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: str = "meanpool"
    grad_clip: float = 3.0  # 0 disables clipping
    checkpoint_every: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"Need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} and {self.epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.patch.embed_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"Patch embed_dim {self.patch.embed_dim} differs from encoder embed_dim {self.encoder.embed_dim}"
            )
        if self.objective.lambda_off > 0 and self.teacher in ("none", ""):
            raise ConfigError("lambda_off > 0 needs a teacher (got --teacher none)")
        try:
            self.patch.grid_shape(self.frontend.n_mels, self.n_frames)
        except InvalidInputError as e:
            raise ConfigError(str(e)) from e

    @property
    def mix(self) -> MixConfig:
        return MixConfig(alpha=self.alpha, seed=self.seed)

    @property
    def n_frames(self) -> int:
        return self.frontend.frames_for(self.input_duration_s)

    @property
    def grid(self) -> tuple[int, int]:
        return self.patch.grid_shape(self.frontend.n_mels, self.n_frames)

    @property
    def patch_stride_ms(self) -> float:
        return self.patch.patch_time * self.frontend.hop_ms

    def steps_per_epoch(self, n_clips: int) -> int:
        return -(-n_clips // self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        values = dict(data)
        nested = {
            "ema": EmaConfig,
            "objective": ObjectiveConfig,
            "frontend": FrontendConfig,
            "patch": PatchConfig,
            "encoder": EncoderConfig,
        }
        for key, sub in nested.items():
            if isinstance(values.get(key), dict):
                values[key] = sub(**values[key])
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        return cls(**values)


@dataclass(frozen=True)
class TrainStepRecord:
    """Losses and optimizer state of one step."""

    step: int
    losses: LossBreakdown
    lr: float
    grad_norm: float
    tau: float

    def log_line(self) -> str:
        l = self.losses
        return (
            f"{self.step} {l.l_m2d:.6f} {l.l_off:.6f} {l.l_total:.6f} "
            f"{self.lr:.6e} {self.grad_norm:.6f}"
        )


@dataclass
class Batch:
    """Index-aligned noisy/clean inputs [B, F, T] with their crops and masks."""

    noisy: torch.Tensor
    clean: torch.Tensor
    clip_ids: list[str]
    offsets: list[int]
    masks: MaskBatch


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def epoch_order(seed: int, epoch: int, n_clips: int) -> np.ndarray:
    return _stream(seed, _ORDER_STREAM, epoch).permutation(n_clips)


def batch_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return _stream(seed, _BATCH_STREAM, epoch, step)


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """
    Linear warm-up to base_lr over the warm-up epochs, then cosine decay to 0.

    Step k is the k-th optimizer update (1-based); step 0 gives 0.
    """
    if step <= 0:
        return 0.0
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step <= warmup:
        return cfg.base_lr * step / warmup
    progress = min((step - warmup) / max(1, total - warmup), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _mixture(
    speech: LogMelSpectrogram,
    noise_corpus: Sequence[LogMelSpectrogram],
    n_frames: int,
    mix: MixConfig,
    rng: np.random.Generator,
) -> tuple[LogMelSpectrogram, LogMelSpectrogram, int]:
    clean, offset = crop_frames(speech, n_frames, rng)
    if mix.alpha == 0.0 and len(noise_corpus) == 0:
        return clean, clean, offset
    noise = sample_noise_segment(noise_corpus, n_frames, rng)
    return mix_noisy(clean, noise, mix.alpha), clean, offset


def build_batch(
    speech: Sequence[LogMelSpectrogram],
    noise_corpus: Sequence[LogMelSpectrogram],
    cfg: TrainConfig,
    rng: np.random.Generator,
    stats: Optional[NormStats] = None,
    clip_ids: Optional[Sequence[str]] = None,
    indices: Optional[Sequence[int]] = None,
    epoch: int = 0,
) -> Batch:
    """
    Build one training batch.

    Per item: crop the speech to T frames, sample and crop a noise segment,
    mix at alpha; the clean crop is kept for the teacher. Both views are
    normalized with the same statistics. Masks come from
    mask_rng(seed, epoch, clip index).

    Args:
        speech: Speech spectrograms of the batch items
        noise_corpus: All noise spectrograms
        cfg: Training configuration
        rng: Generator for crops and noise draws
        stats: Normalization statistics (None leaves values unnormalized)
        clip_ids: Ids of the batch items (default: "0", "1", ...)
        indices: Corpus indices of the batch items, used for mask seeding
        epoch: Current epoch, used for mask seeding

    Raises:
        InvalidInputError: for an empty batch, or alpha > 0 without noise clips
    """
    if len(speech) == 0:
        raise InvalidInputError("Cannot build an empty batch")
    if cfg.alpha > 0 and len(noise_corpus) == 0:
        raise InvalidInputError(f"alpha={cfg.alpha} needs a non-empty noise corpus")
    indices = list(indices) if indices is not None else list(range(len(speech)))
    clip_ids = list(clip_ids) if clip_ids is not None else [str(i) for i in indices]

    mix = cfg.mix
    noisy, clean, offsets = [], [], []
    for spec in speech:
        mixed, crop, offset = _mixture(spec, noise_corpus, cfg.n_frames, mix, rng)
        if stats is not None:
            mixed, crop = normalize(mixed, stats), normalize(crop, stats)
        noisy.append(mixed.values)
        clean.append(crop.values)
        offsets.append(offset)

    n_freq, n_time = cfg.grid
    plans = [
        sample_mask(n_freq * n_time, cfg.mask_ratio, rng=mask_rng(cfg.seed, epoch, i))
        for i in indices
    ]
    return Batch(
        noisy=torch.stack(noisy),
        clean=torch.stack(clean),
        clip_ids=clip_ids,
        offsets=offsets,
        masks=MaskBatch.from_plans(plans),
    )


def compute_losses(
    state: ModelState, batch: Batch, cfg: TrainConfig
) -> tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
    """
    Forward the online, target and teacher networks and compute the losses.

    The target sees the masked patches of the same noisy input; the teacher
    sees the clean crop. A term whose weight is zero is not computed at all.

    Returns:
        (weighted total, l_m2d or None, l_off or None)
    """
    online = state.online
    encoder = online.encoder
    dtype = encoder.patch_embed.weight.dtype
    n_freq, n_time = cfg.grid
    pos = positional_encoding(n_freq, n_time, cfg.encoder.embed_dim, dtype=dtype)

    patches = patchify_tensor(batch.noisy.to(dtype), cfg.patch.patch_freq, cfg.patch.patch_time)
    tokens = embed_patches(patches, encoder.patch_embed, pos)
    visible, _ = partition(tokens, batch.masks)
    z_v = encoder_forward(encoder, visible).final
    z_hat_m = predictor_forward(online, z_v, batch.masks, pos)

    l_m2d = None
    if cfg.objective.lambda_m2d > 0:
        with torch.no_grad():
            target_tokens = embed_patches(patches, state.target.patch_embed, pos)
            masked_tokens = gather_tokens(target_tokens, batch.masks.masked_index)
            z_m = encoder_forward(state.target, masked_tokens).final
        prediction = MaskedPredictionBatch.from_target(z_hat_m, z_m, cfg.objective.standardize_eps)
        l_m2d = loss_m2d(prediction.z_hat_m, prediction.z_tilde_m, cfg.objective.l2_eps)

    l_off = None
    if cfg.objective.lambda_off > 0:
        if state.teacher is None or online.projection is None:
            raise ConfigError("Distillation is enabled but the model has no teacher")
        frames = reassemble_frame_order(z_v, z_hat_m, batch.masks, (n_freq, n_time))
        h_hat = online.projection(frames)
        h = teacher_forward(state.teacher, batch.clean.to(dtype), batch.clip_ids, batch.offsets)
        h = align_teacher(h.to(dtype), cfg.patch_stride_ms, state.teacher.frame_stride_ms)
        aligned = crop_to_common(h, h_hat)
        l_off = loss_off(aligned.h, aligned.h_hat, cfg.objective.l2_eps)

    return combine_losses(cfg.objective, l_m2d, l_off), l_m2d, l_off


def build_optimizer(state: ModelState, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        parameter_groups(state.online, cfg.weight_decay), lr=cfg.base_lr, betas=cfg.betas
    )


def train_step(
    state: ModelState,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    cfg: TrainConfig,
    steps_per_epoch: int,
) -> TrainStepRecord:
    """
    One optimizer update of theta followed by the EMA update of xi.

    Mutates state (online, target, step) and returns the step record.

    Raises:
        NonFiniteLossError: if the total loss is NaN or inf (nothing is updated)
    """
    step = state.step + 1
    lr = lr_schedule(step, cfg, steps_per_epoch)
    for group in optimizer.param_groups:
        group["lr"] = lr

    state.online.train()
    optimizer.zero_grad(set_to_none=True)
    total, l_m2d, l_off = compute_losses(state, batch, cfg)
    losses = loss_total(
        cfg.objective,
        l_m2d.item() if l_m2d is not None else 0.0,
        l_off.item() if l_off is not None else 0.0,
    )
    if not math.isfinite(losses.l_total):
        record = TrainStepRecord(step, losses, lr, float("nan"), cfg.ema.tau)
        raise NonFiniteLossError(f"Non-finite loss at step {step}: {record.log_line()}", record)

    total.backward()
    params = [p for p in state.online.parameters() if p.grad is not None]
    max_norm = cfg.grad_clip if cfg.grad_clip > 0 else float("inf")
    grad_norm = torch.nn.utils.clip_grad_norm_(params, max_norm)
    optimizer.step()

    tau = cfg.ema.tau_at(step, cfg.epochs * steps_per_epoch)
    ema_update(state.target, state.online.encoder, tau)
    state.step = step
    return TrainStepRecord(step, losses, lr, float(grad_norm), tau)


def estimate_training_stats(corpus: LoadedCorpus, cfg: TrainConfig) -> NormStats:
    """
    Normalization statistics of the mixed training distribution.

    One noisy crop per speech clip, drawn from a dedicated stream so the
    training streams are unaffected.
    """
    rng = _stream(cfg.seed, _STATS_STREAM)
    mixtures = [_mixture(spec, corpus.noise, cfg.n_frames, cfg.mix, rng)[0] for spec in corpus.speech]
    return compute_dataset_stats(mixtures, corpus_id=f"{corpus.name}-alpha{cfg.alpha}")


def _stats_to_dict(stats: NormStats) -> dict:
    return {
        "mean": stats.mean,
        "std": stats.std,
        "corpus_id": stats.corpus_id,
        "n_frames_seen": stats.n_frames_seen,
    }


def restore_model(
    checkpoint: Path | dict, with_teacher: bool = True
) -> tuple[ModelState, TrainConfig, NormStats]:
    """
    Rebuild a ModelState from a checkpoint.

    Args:
        checkpoint: Path to a checkpoint or an already loaded body
        with_teacher: Rebuild the teacher too (not needed for probing)

    Raises:
        CheckpointError: if the file is missing or shapes do not match
    """
    body = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    try:
        cfg = TrainConfig.from_dict(body["config"])
        stats = NormStats(**body["stats"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"Checkpoint config is unusable: {e}") from e

    teacher = None
    if cfg.objective.lambda_off > 0 and with_teacher:
        teacher = build_teacher(cfg.teacher, cfg.frontend, seed=cfg.seed)
    state = init_model(
        cfg.encoder, cfg.patch, teacher, cfg.seed, cfg.frontend.n_mels, cfg.frontend.hop_ms
    )
    if state.online.projection is None and cfg.objective.lambda_off > 0:
        # Projection width comes from the checkpoint when the teacher is not rebuilt
        state.online.projection = torch.nn.Linear(
            cfg.patch.n_freq_patches(cfg.frontend.n_mels) * cfg.encoder.embed_dim,
            body["online"]["projection.weight"].shape[0],
        )
    load_module_state(state.online, body["online"], "Online network")
    load_module_state(state.target, body["target"], "Target encoder")
    state.step = int(body["step"])
    return state, cfg, stats


@dataclass
class PretrainOptions:
    """Options for a pre-training run."""

    verbose: bool = False
    progress_callback: Callable[[str], None] | None = None
    resume: bool = False
    stop_after_epoch: int | None = None  # end early, as if interrupted


@dataclass
class PretrainResult:
    """Results from a pre-training run."""

    steps: int = 0
    epochs_completed: int = 0
    records: list[TrainStepRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_checkpoint: Path | None = None
    log_path: Path | None = None
    stats: NormStats | None = None
    errors: list[str] = field(default_factory=list)


class Pretrainer:
    """
    Runs the epoch loop, writes the step log and checkpoints.
    """

    def __init__(self, cfg: TrainConfig, options: PretrainOptions | None = None):
        self.cfg = cfg
        self.options = options or PretrainOptions()
        self.result = PretrainResult()
        self.state: ModelState | None = None

    def _log(self, message: str) -> None:
        """Log a message if verbose mode is enabled."""
        if self.options.verbose and self.options.progress_callback:
            self.options.progress_callback(message)

    def _save(self, ckpt_dir: Path, state: ModelState, optimizer, stats: NormStats, epoch: int) -> Path:
        payload = {
            "online": state.online.state_dict(),
            "target": state.target.state_dict(),
            "optimizer": optimizer.state_dict(),
            "config": self.cfg.to_dict(),
            "stats": _stats_to_dict(stats),
        }
        path = save_checkpoint(
            ckpt_dir / f"epoch_{epoch:04d}.pt", payload, self.cfg.seed, state.step, epoch
        )
        save_checkpoint(ckpt_dir / LAST_CHECKPOINT, payload, self.cfg.seed, state.step, epoch)
        self.result.checkpoints.append(path)
        return path

    def _resume(self, ckpt_dir: Path, state: ModelState, optimizer, log_path: Path):
        body = load_checkpoint(ckpt_dir / LAST_CHECKPOINT)
        if TrainConfig.from_dict(body["config"]) != self.cfg:
            raise CheckpointError("Cannot resume: the checkpoint was written with another config")
        load_module_state(state.online, body["online"], "Online network")
        load_module_state(state.target, body["target"], "Target encoder")
        optimizer.load_state_dict(body["optimizer"])
        state.step = int(body["step"])

        # Drop log lines written after the checkpoint
        if log_path.exists():
            kept = [
                line for line in log_path.read_text().splitlines()
                if line.strip() and int(line.split()[0]) <= state.step
            ]
            log_path.write_text("".join(f"{line}\n" for line in kept))
        self._log(f"  Resumed from step {state.step} (epoch {body['epoch']})")
        return int(body["epoch"]), NormStats(**body["stats"])

    def run(self, corpus: LoadedCorpus, out_dir: Path) -> PretrainResult:
        """
        Pre-train on a loaded corpus, writing logs and checkpoints under out_dir.

        Args:
            corpus: Speech (and noise) spectrograms
            out_dir: Output directory (created if missing)

        Returns:
            PretrainResult with the step records of this invocation
        """
        cfg = self.cfg
        if not corpus.speech:
            raise InvalidInputError("Speech corpus is empty")
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / CHECKPOINT_DIR
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_FILE
        self.result.log_path = log_path

        teacher = None
        if cfg.objective.lambda_off > 0:
            teacher = build_teacher(cfg.teacher, cfg.frontend, seed=cfg.seed)
        state = init_model(
            cfg.encoder, cfg.patch, teacher, cfg.seed, cfg.frontend.n_mels, cfg.frontend.hop_ms
        )
        optimizer = build_optimizer(state, cfg)

        start_epoch = 0
        if self.options.resume and (ckpt_dir / LAST_CHECKPOINT).exists():
            start_epoch, stats = self._resume(ckpt_dir, state, optimizer, log_path)
        else:
            stats = estimate_training_stats(corpus, cfg)
            log_path.write_text("")
        self.result.stats = stats

        n_clips = len(corpus.speech)
        steps_per_epoch = cfg.steps_per_epoch(n_clips)
        self._log(
            f"  {n_clips} clips, {steps_per_epoch} steps/epoch, epochs {start_epoch + 1}..{cfg.epochs}"
        )

        with open(log_path, "a") as log_file:
            for epoch in range(start_epoch, cfg.epochs):
                order = epoch_order(cfg.seed, epoch, n_clips)
                for b in range(steps_per_epoch):
                    indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size].tolist()
                    batch = build_batch(
                        [corpus.speech[i] for i in indices],
                        corpus.noise,
                        cfg,
                        batch_rng(cfg.seed, epoch, b),
                        stats,
                        clip_ids=[corpus.clip_ids[i] for i in indices],
                        indices=indices,
                        epoch=epoch,
                    )
                    try:
                        record = train_step(state, optimizer, batch, cfg, steps_per_epoch)
                    except NonFiniteLossError as e:
                        log_file.write(f"{e.record.log_line()}\n")
                        logger.error("%s", e)
                        raise
                    log_file.write(record.log_line() + "\n")
                    log_file.flush()
                    self.result.records.append(record)

                last = self.result.records[-1] if self.result.records else None
                if last is not None:
                    self._log(
                        f"  Epoch {epoch + 1}/{cfg.epochs}: l_total={last.losses.l_total:.4f} lr={last.lr:.2e}"
                    )
                self.result.epochs_completed = epoch + 1
                if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                    self.result.final_checkpoint = self._save(ckpt_dir, state, optimizer, stats, epoch + 1)
                if self.options.stop_after_epoch is not None and epoch + 1 >= self.options.stop_after_epoch:
                    break

        self.result.steps = state.step
        self.state = state
        return self.result


def run_pretraining(
    cfg: TrainConfig,
    corpus: LoadedCorpus,
    out_dir: Path,
    resume: bool = False,
    verbose: bool = False,
    progress_callback: Callable[[str], None] | None = None,
    stop_after_epoch: int | None = None,
) -> PretrainResult:
    """
    Convenience function to run pre-training.

    Args:
        cfg: Training configuration
        corpus: Loaded speech/noise corpus
        out_dir: Output directory for train_log.txt and checkpoints/
        resume: Continue from checkpoints/last.pt when present
        verbose: Show progress
        progress_callback: Optional callback for progress messages
        stop_after_epoch: Stop after this many epochs (simulated interruption)
    """
    options = PretrainOptions(
        verbose=verbose,
        progress_callback=progress_callback or (print if verbose else None),
        resume=resume,
        stop_after_epoch=stop_after_epoch,
    )
    return Pretrainer(cfg, options).run(corpus, out_dir)
