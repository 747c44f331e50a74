"""
Checkpoint container.

A checkpoint is a torch-serialized dict of named tensors and plain values
(online/target state dicts, optimizer moments, step, epoch, the flat config)
with a plain-text sidecar `<name>.meta` of `key=value` lines:

    format_version=1
    framework=speech-ssl
    torch_version=2.3.1
    seed=0
    step=24
    epoch=3
"""

from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .errors import CheckpointError, InvalidInputError
from .frontend import read_key_values

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FRAMEWORK_NAME = "speech-ssl"
META_SUFFIX = ".meta"


def meta_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def save_checkpoint(path: Path, payload: dict[str, Any], seed: int, step: int, epoch: int) -> Path:
    """
    Write a checkpoint and its metadata header.

    The payload is written to a temporary file and renamed, so an interrupted
    write never leaves a truncated checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**payload, "format_version": FORMAT_VERSION, "seed": seed, "step": step, "epoch": epoch}

    tmp = path.with_name(path.name + ".tmp")
    torch.save(body, tmp)
    os.replace(tmp, path)

    header = {
        "format_version": FORMAT_VERSION,
        "framework": FRAMEWORK_NAME,
        "torch_version": torch.__version__,
        "seed": seed,
        "step": step,
        "epoch": epoch,
    }
    meta_path(path).write_text("".join(f"{k}={v}\n" for k, v in header.items()))
    logger.info("Checkpoint saved: %s (step %d, epoch %d)", path, step, epoch)
    return path


def read_checkpoint_meta(path: Path) -> dict[str, str]:
    """Read the metadata header of a checkpoint."""
    header = meta_path(path)
    if not header.exists():
        raise CheckpointError(f"Checkpoint metadata not found: {header}")
    try:
        return read_key_values(header)
    except InvalidInputError as e:
        raise CheckpointError(str(e)) from e


def load_checkpoint(path: Path) -> dict[str, Any]:
    """
    Load a checkpoint written by save_checkpoint().

    Raises:
        CheckpointError: if the file is missing, unreadable or of another format
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        body = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(body, dict) or body.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{FORMAT_VERSION} checkpoint")
    return body


def load_module_state(module: nn.Module, state: dict[str, torch.Tensor], label: str) -> None:
    """Strict state-dict load; any missing, extra or reshaped tensor is a CheckpointError."""
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{label} does not match the checkpoint: {e}") from e


def artifact_hash(path: Path) -> str:
    """Git-style blob hash (sha1 over "blob <size>\\0" + content)."""
    data = Path(path).read_bytes()
    digest = hashlib.sha1()
    digest.update(f"blob {len(data)}\0".encode())
    digest.update(data)
    return digest.hexdigest()
