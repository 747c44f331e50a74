"""
Frozen-encoder probing.

Per-layer encoder outputs are mean-pooled over patch positions and fed to
either a weighted-layer-sum probe (softmax-normalized learnable scalar per
layer, combined feature into one linear classifier) or a linear classifier
on the final layer only.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import LoadedCorpus
from .errors import ConfigError, InvalidInputError
from .frontend import NormStats, normalize
from .model import ModelState, encoder_forward
from .patching import embed_patches, patchify_tensor, positional_encoding
from .training import TrainConfig, restore_model

logger = logging.getLogger(__name__)

PROBE_MODES = ("weighted-sum", "final-layer")
RESULTS_FILE = "results.csv"
LAYER_WEIGHTS_FILE = "layer_weights.json"


@dataclass(frozen=True)
class ProbeConfig:
    """Probe training settings; fixed_layer_weights pins the weighted-sum mix."""

    mode: str = "weighted-sum"
    epochs: int = 300
    lr: float = 1e-2
    train_ratio: float = 0.7
    seed: int = 0
    fixed_layer_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.mode not in PROBE_MODES:
            raise ConfigError(f"Unknown probe mode '{self.mode}', expected one of {PROBE_MODES}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("Probe epochs must be >= 1 and lr positive")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if self.fixed_layer_weights is not None:
            if any(w < 0 for w in self.fixed_layer_weights) or sum(self.fixed_layer_weights) <= 0:
                raise ConfigError("fixed_layer_weights must be non-negative with a positive sum")


@dataclass(frozen=True)
class ProbeReport:
    """Test accuracy of one probe; layer weights only in weighted-sum mode."""

    task: str
    mode: str
    accuracy: float
    n_test: int
    n_train: int
    layer_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


@dataclass
class LayerFeatures:
    """Pooled features [n_clips, n_layers, d] aligned with clip_ids."""

    clip_ids: list[str]
    features: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.features.shape[1]


def parameter_checksum(module: nn.Module) -> str:
    """sha1 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha1()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def extract_layer_features(
    state: ModelState,
    corpus: LoadedCorpus,
    cfg: TrainConfig,
    stats: Optional[NormStats] = None,
    include_embedding: bool = False,
    max_workers: int = 1,
) -> LayerFeatures:
    """
    Mean-pooled per-layer outputs of the online encoder for every clip.

    Whole clips are patchified (trailing frames that do not fill a patch are
    dropped), normalized with the training statistics and encoded with all
    layers exposed. The encoder is only read.

    Args:
        state: Trained or initialized model
        corpus: Clips to encode
        cfg: Training configuration the model was built with
        stats: Normalization statistics (None keeps raw log-mel values)
        include_embedding: Keep the embedding output as layer 0
        max_workers: Clips encoded concurrently

    Raises:
        ConfigError: if the corpus frontend does not match the model
        InvalidInputError: if a clip has fewer frames than one patch
    """
    encoder = state.online.encoder
    if state.n_mels != cfg.frontend.n_mels:
        raise ConfigError(f"Model expects {state.n_mels} mel bins, config has {cfg.frontend.n_mels}")
    dtype = encoder.patch_embed.weight.dtype

    def encode(index: int) -> tuple[int, np.ndarray]:
        spec = corpus.speech[index]
        if spec.config != cfg.frontend:
            raise ConfigError(f"Clip {corpus.clip_ids[index]} was computed with another frontend")
        if stats is not None:
            spec = normalize(spec, stats)
        n_freq, n_time = cfg.patch.grid_shape(spec.n_mels, spec.n_frames)
        pos = positional_encoding(n_freq, n_time, cfg.encoder.embed_dim, dtype=dtype)
        with torch.no_grad():
            patches = patchify_tensor(spec.values.to(dtype), cfg.patch.patch_freq, cfg.patch.patch_time)
            tokens = embed_patches(patches, encoder.patch_embed, pos)
            layers = encoder_forward(encoder, tokens, want_all_layers=True).layers
        if not include_embedding:
            layers = layers[1:]
        return index, torch.stack([layer.mean(dim=0) for layer in layers]).numpy()

    was_training = state.online.training
    state.online.eval()
    pooled: list[np.ndarray | None] = [None] * len(corpus.speech)
    try:
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
            for index, features in executor.map(encode, range(len(corpus.speech))):
                pooled[index] = features
    finally:
        state.online.train(was_training)

    d = cfg.encoder.embed_dim
    n_layers = cfg.encoder.depth + (1 if include_embedding else 0)
    stacked = np.stack(pooled) if pooled else np.zeros((0, n_layers, d), dtype=np.float32)
    return LayerFeatures(clip_ids=list(corpus.clip_ids), features=stacked)


def stratified_split(
    labels: np.ndarray, train_ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """
    Disjoint train/test indices with every class split at train_ratio.

    Classes with at least two members keep one item on each side; singleton
    classes go to the training side.
    """
    train, test = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) < 2:
            train.extend(members.tolist())
            continue
        n_train = min(max(int(round(train_ratio * len(members))), 1), len(members) - 1)
        train.extend(members[:n_train].tolist())
        test.extend(members[n_train:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


class LayerProbe(nn.Module):
    """Softmax-weighted sum over layers followed by a linear classifier."""

    def __init__(self, n_layers: int, dim: int, n_classes: int, fixed_weights: Optional[Sequence[float]] = None):
        super().__init__()
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.fixed_weights = None
        if fixed_weights is not None:
            if len(fixed_weights) != n_layers:
                raise ConfigError(f"{len(fixed_weights)} fixed weights for {n_layers} layers")
            w = torch.tensor(fixed_weights, dtype=torch.float32)
            self.fixed_weights = w / w.sum()
            self.layer_logits.requires_grad_(False)
        self.classifier = nn.Linear(dim, n_classes)

    def layer_weights(self) -> torch.Tensor:
        if self.fixed_weights is not None:
            return self.fixed_weights
        return self.layer_logits.softmax(dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        combined = torch.einsum("l,bld->bd", self.layer_weights(), x)
        return self.classifier(combined)


def train_probe(
    features: np.ndarray | LayerFeatures,
    labels: Sequence[int],
    cfg: ProbeConfig | None = None,
    task: str = "task",
) -> ProbeReport:
    """
    Train a probe on frozen features and report test accuracy.

    Features are standardized per layer and dimension with training-split
    statistics; the probe is trained full-batch with Adam.

    Args:
        features: [n_clips, n_layers, d] pooled features
        labels: One integer class per clip
        cfg: Probe configuration
        task: Name recorded in the report

    Raises:
        InvalidInputError: for fewer than two classes, misaligned inputs or a
            split whose training side has a single class or whose test side is empty
    """
    cfg = cfg or ProbeConfig()
    x = features.features if isinstance(features, LayerFeatures) else np.asarray(features)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or len(x) != len(y):
        raise InvalidInputError(f"Need features [n, layers, d] aligned with labels, got {x.shape} / {len(y)}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise InvalidInputError(f"Task '{task}' has a single class")

    train_idx, test_idx = stratified_split(y, cfg.train_ratio, np.random.default_rng(cfg.seed))
    if len(test_idx) == 0 or len(np.unique(y[train_idx])) < 2:
        raise InvalidInputError(f"Task '{task}': degenerate train/test split")

    if cfg.mode == "final-layer":
        x = x[:, -1:, :]
    mean = x[train_idx].mean(axis=0, keepdims=True)
    std = x[train_idx].std(axis=0, keepdims=True) + 1e-6
    x = torch.tensor((x - mean) / std, dtype=torch.float32)
    # Labels are remapped to 0..C-1
    y_index = torch.tensor(np.searchsorted(classes, y), dtype=torch.long)

    fixed = cfg.fixed_layer_weights if cfg.mode == "weighted-sum" else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        probe = LayerProbe(x.shape[1], x.shape[2], len(classes), fixed)
    optimizer = torch.optim.Adam([p for p in probe.parameters() if p.requires_grad], lr=cfg.lr)

    x_train, y_train = x[train_idx], y_index[train_idx]
    for _ in range(cfg.epochs):
        optimizer.zero_grad()
        F.cross_entropy(probe(x_train), y_train).backward()
        optimizer.step()

    with torch.no_grad():
        predicted = probe(x[test_idx]).argmax(dim=-1)
        accuracy = float((predicted == y_index[test_idx]).float().mean())
        weights = tuple(float(w) for w in probe.layer_weights()) if cfg.mode == "weighted-sum" else None

    return ProbeReport(
        task=task,
        mode=cfg.mode,
        accuracy=accuracy,
        n_test=len(test_idx),
        n_train=len(train_idx),
        layer_weights=weights,
    )


def write_results_csv(reports: Sequence[ProbeReport], path: Path) -> Path:
    """Write `task,mode,accuracy,n_test`, one row per report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["task,mode,accuracy,n_test"]
    lines += [f"{r.task},{r.mode},{r.accuracy:.4f},{r.n_test}" for r in reports]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_layer_weights(reports: Sequence[ProbeReport], path: Path) -> Path:
    """Dump the layer weights of weighted-sum reports as a JSON map task -> weights."""
    weights = {r.task: list(r.layer_weights) for r in reports if r.layer_weights is not None}
    Path(path).write_text(json.dumps(weights, indent=2, sort_keys=True) + "\n")
    return Path(path)


@dataclass
class EvalOptions:
    """Options for an evaluation suite."""

    verbose: bool = False
    progress_callback: Callable[[str], None] | None = None
    modes: tuple[str, ...] = PROBE_MODES
    max_workers: int = 1


@dataclass
class EvalResult:
    """Results from an evaluation suite."""

    reports: list[ProbeReport] = field(default_factory=list)
    checksum_before: str = ""
    checksum_after: str = ""
    results_path: Path | None = None
    errors: list[str] = field(default_factory=list)


class EvalSuite:
    """
    Probes a frozen model on every (task, mode) pair.
    """

    def __init__(self, probe_cfg: ProbeConfig | None = None, options: EvalOptions | None = None):
        self.probe_cfg = probe_cfg or ProbeConfig()
        self.options = options or EvalOptions()
        for mode in self.options.modes:
            if mode not in PROBE_MODES:
                raise ConfigError(f"Unknown probe mode '{mode}', expected one of {PROBE_MODES}")
        self.result = EvalResult()

    def _log(self, message: str) -> None:
        """Log a message if verbose mode is enabled."""
        if self.options.verbose and self.options.progress_callback:
            self.options.progress_callback(message)

    def _probe_tasks(self, features: LayerFeatures, corpus: LoadedCorpus, tasks: Sequence[str]) -> None:
        for task in tasks:
            for mode in self.options.modes:
                cfg = replace(self.probe_cfg, mode=mode)
                try:
                    report = train_probe(features, corpus.labels[task], cfg, task=task)
                except InvalidInputError as e:
                    self.result.errors.append(f"{task}/{mode}: {e}")
                    continue
                self._log(f"    {task:<10} {mode:<13} accuracy={report.accuracy:.3f}")
                self.result.reports.append(report)

    def evaluate(
        self,
        state: ModelState,
        train_cfg: TrainConfig,
        stats: Optional[NormStats],
        corpus: LoadedCorpus,
        tasks: Sequence[str] | None = None,
    ) -> EvalResult:
        """Extract features once and train one probe per (task, mode)."""
        tasks = list(corpus.labels) if tasks is None else list(tasks)
        unknown = [t for t in tasks if t not in corpus.labels]
        if unknown:
            raise ConfigError(f"Corpus has no labels for task(s): {', '.join(unknown)}")

        self.result.checksum_before = parameter_checksum(state.online)
        if tasks:
            self._log(f"  Extracting layer features for {len(corpus.speech)} clips...")
            try:
                features = extract_layer_features(
                    state, corpus, train_cfg, stats, max_workers=self.options.max_workers
                )
            except InvalidInputError as e:
                # A clip that cannot be encoded fails every probe, not the suite
                for task in tasks:
                    for mode in self.options.modes:
                        self.result.errors.append(f"{task}/{mode}: {e}")
            else:
                self._probe_tasks(features, corpus, tasks)
        self.result.checksum_after = parameter_checksum(state.online)
        if self.result.checksum_after != self.result.checksum_before:
            self.result.errors.append("Encoder parameters changed during evaluation")
        return self.result


def evaluate_state(
    state: ModelState,
    train_cfg: TrainConfig,
    stats: Optional[NormStats],
    corpus: LoadedCorpus,
    tasks: Sequence[str] | None = None,
    probe_cfg: ProbeConfig | None = None,
    modes: Sequence[str] = PROBE_MODES,
) -> EvalResult:
    """Probe an in-memory model (no checkpoint round trip)."""
    suite = EvalSuite(probe_cfg, EvalOptions(modes=tuple(modes)))
    return suite.evaluate(state, train_cfg, stats, corpus, tasks)


def run_eval_suite(
    checkpoint: Path,
    corpus: LoadedCorpus,
    tasks: Sequence[str] | None = None,
    probe_cfg: ProbeConfig | None = None,
    out_dir: Path | None = None,
    modes: Sequence[str] = PROBE_MODES,
    verbose: bool = False,
    progress_callback: Callable[[str], None] | None = None,
    max_workers: int = 1,
    restored: tuple[ModelState, TrainConfig, Optional[NormStats]] | None = None,
) -> EvalResult:
    """
    Convenience function to probe a checkpoint.

    Args:
        checkpoint: Checkpoint written by pre-training
        corpus: Labeled corpus
        tasks: Task names (default: every labeled task)
        probe_cfg: Probe settings shared by all probes
        out_dir: Where results.csv and layer_weights.json go (optional)
        modes: Probe modes to run
        verbose: Show progress
        progress_callback: Optional callback for progress messages
        max_workers: Clips encoded concurrently
        restored: restore_model() output for this checkpoint, if already loaded

    Raises:
        CheckpointError: if the checkpoint is missing or does not match
    """
    if restored is None:
        restored = restore_model(checkpoint, with_teacher=False)
    state, train_cfg, stats = restored
    options = EvalOptions(
        verbose=verbose,
        progress_callback=progress_callback or (print if verbose else None),
        modes=tuple(modes),
        max_workers=max_workers,
    )
    result = EvalSuite(probe_cfg, options).evaluate(state, train_cfg, stats, corpus, tasks)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.results_path = write_results_csv(result.reports, out_dir / RESULTS_FILE)
        write_layer_weights(result.reports, out_dir / LAYER_WEIGHTS_FILE)
    return result
