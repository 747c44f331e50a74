"""
Run configuration and manifests.

Config files are YAML mappings of flat keys (`alpha: 0.2`, `patch_time: 2`,
`lambda_off: 0.5`, ...) or of sections (`frontend:`, `patch:`, `encoder:`,
`ema:`, `objective:`) holding the same fields. Precedence is
defaults < config file < command-line flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .checkpoint import artifact_hash
from .errors import ConfigError
from .frontend import FrontendConfig
from .model import EmaConfig, EncoderConfig
from .objectives import ObjectiveConfig
from .patching import PatchConfig
from .training import TrainConfig

MANIFEST_FILE = "manifest.json"

# flat key -> (section, field); section None is TrainConfig itself
FLAT_KEYS: dict[str, tuple[str | None, str]] = {
    "epochs": (None, "epochs"),
    "warmup_epochs": (None, "warmup_epochs"),
    "batch_size": (None, "batch_size"),
    "base_lr": (None, "base_lr"),
    "weight_decay": (None, "weight_decay"),
    "betas": (None, "betas"),
    "input_duration_s": (None, "input_duration_s"),
    "alpha": (None, "alpha"),
    "mask_ratio": (None, "mask_ratio"),
    "seed": (None, "seed"),
    "teacher": (None, "teacher"),
    "grad_clip": (None, "grad_clip"),
    "checkpoint_every": (None, "checkpoint_every"),
    "tau": ("ema", "tau"),
    "tau_end": ("ema", "tau_end"),
    "ema_schedule": ("ema", "schedule"),
    "lambda_m2d": ("objective", "lambda_m2d"),
    "lambda_off": ("objective", "lambda_off"),
    "standardize_eps": ("objective", "standardize_eps"),
    "l2_eps": ("objective", "l2_eps"),
    "sample_rate": ("frontend", "sample_rate"),
    "window_ms": ("frontend", "window_ms"),
    "hop_ms": ("frontend", "hop_ms"),
    "n_mels": ("frontend", "n_mels"),
    "fmin": ("frontend", "fmin"),
    "fmax": ("frontend", "fmax"),
    "log_floor": ("frontend", "log_floor"),
    "patch_freq": ("patch", "patch_freq"),
    "patch_time": ("patch", "patch_time"),
    "preset": ("encoder", "preset"),
    "depth": ("encoder", "depth"),
    "embed_dim": ("encoder", "embed_dim"),
    "n_heads": ("encoder", "n_heads"),
    "mlp_ratio": ("encoder", "mlp_ratio"),
    "predictor": ("encoder", "predictor"),
    "predictor_depth": ("encoder", "predictor_depth"),
}

ALIASES = {"duration": "input_duration_s", "lr": "base_lr"}

SECTIONS = ("ema", "objective", "frontend", "patch", "encoder")
_NESTED_KEYS = {(section, name): key for key, (section, name) in FLAT_KEYS.items()}


def _canonical(key: str) -> str:
    key = ALIASES.get(key, key)
    if key not in FLAT_KEYS:
        raise ConfigError(f"Unknown config key '{key}'")
    return key


def flatten_config(data: Mapping[str, Any]) -> dict[str, Any]:
    """
    Turn a (possibly sectioned) mapping into flat keys.

    Raises:
        ConfigError: for unknown keys or sections
    """
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS and isinstance(value, Mapping):
            for name, inner in value.items():
                if (key, name) not in _NESTED_KEYS:
                    raise ConfigError(f"Unknown config key '{key}.{name}'")
                flat[_NESTED_KEYS[(key, name)]] = inner
        else:
            flat[_canonical(key)] = value
    return flat


def load_config_file(path: Path) -> dict[str, Any]:
    """
    Read a YAML config file into flat keys.

    Raises:
        FileNotFoundError: if the file does not exist
        ConfigError: if it is not a mapping or has unknown keys
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return flatten_config(data)


def build_train_config(flat: Mapping[str, Any]) -> TrainConfig:
    """
    Build a TrainConfig from flat keys; missing keys keep their defaults.

    The encoder preset is applied first and explicit encoder keys override it.
    Patch tokens always take the encoder width.

    Raises:
        ConfigError: for unknown keys, wrong types or invalid values
    """
    sections: dict[str | None, dict[str, Any]] = {None: {}, **{s: {} for s in SECTIONS}}
    for key, value in flat.items():
        section, name = FLAT_KEYS[_canonical(key)]
        sections[section][name] = value

    try:
        encoder_values = dict(sections["encoder"])
        preset = encoder_values.pop("preset", "tiny")
        encoder = EncoderConfig.from_preset(preset, **encoder_values)
        top = dict(sections[None])
        if "betas" in top:
            top["betas"] = tuple(float(b) for b in top["betas"])
        return TrainConfig(
            **top,
            ema=EmaConfig(**sections["ema"]),
            objective=ObjectiveConfig(**sections["objective"]),
            frontend=FrontendConfig(**sections["frontend"]),
            patch=PatchConfig(**sections["patch"], embed_dim=encoder.embed_dim),
            encoder=encoder,
        )
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def resolve_train_config(
    config_file: Path | None = None, overrides: Mapping[str, Any] | None = None
) -> TrainConfig:
    """defaults < config file < overrides (None-valued overrides are ignored)."""
    flat = load_config_file(config_file) if config_file else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[_canonical(key)] = value
    return build_train_config(flat)


def to_flat(cfg: TrainConfig) -> dict[str, Any]:
    """Flat-key snapshot of a TrainConfig (inverse of build_train_config)."""
    nested = asdict(cfg)
    flat: dict[str, Any] = {}
    for key, (section, name) in FLAT_KEYS.items():
        value = nested[name] if section is None else nested[section][name]
        flat[key] = list(value) if isinstance(value, tuple) else value
    return flat


@dataclass
class RunManifest:
    """
    Everything needed to reproduce one command invocation.

    Artifacts map output-relative paths to git-style blob hashes.
    """

    command: str
    argv: list[str]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def hash_outputs(self, root: Path, pattern: str = "**/*") -> None:
        """Hash every file under root matching pattern (the manifest itself excluded)."""
        root = Path(root)
        self.artifacts = {
            str(p.relative_to(root)): artifact_hash(p)
            for p in sorted(root.glob(pattern))
            if p.is_file() and p.name != MANIFEST_FILE and not p.name.endswith(".tmp")
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"{path}: not a run manifest: {e}") from e
