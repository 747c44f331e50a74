"""
Shared fixtures: a tiny training configuration and a random in-memory corpus.

Tests marked `slow` run only when selected with `-m slow`.
"""

import numpy as np
import pytest
import torch

from src.corpus import LoadedCorpus
from src.frontend import FrontendConfig, LogMelSpectrogram
from src.model import EncoderConfig
from src.objectives import ObjectiveConfig
from src.patching import PatchConfig
from src.training import TrainConfig

TINY_FRONTEND = FrontendConfig(n_mels=16)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (select with -m slow)")


def pytest_collection_modifyitems(config, items):
    if "slow" in (config.getoption("-m") or ""):
        return
    skip = pytest.mark.skip(reason="slow; run with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(**overrides) -> TrainConfig:
    """16 mel bins, 0.16 s inputs, 8x2 patches (2x8 grid), depth-2 width-16 encoder."""
    objective = ObjectiveConfig(
        lambda_m2d=overrides.pop("lambda_m2d", 1.0),
        lambda_off=overrides.pop("lambda_off", 1.0),
    )
    values = dict(
        epochs=2,
        warmup_epochs=1,
        batch_size=4,
        input_duration_s=0.16,
        alpha=0.2,
        objective=objective,
        frontend=TINY_FRONTEND,
        patch=PatchConfig(patch_freq=8, patch_time=2, embed_dim=16),
        encoder=EncoderConfig(depth=2, embed_dim=16, n_heads=2),
        teacher="meanpool",
    )
    values.update(overrides)
    return TrainConfig(**values)


# tiny_config as flat config keys, for the config layer and ablation grids
TINY_FLAT = {
    "epochs": 1,
    "warmup_epochs": 0,
    "batch_size": 4,
    "input_duration_s": 0.16,
    "alpha": 0.2,
    "n_mels": 16,
    "patch_freq": 8,
    "patch_time": 2,
    "depth": 2,
    "embed_dim": 16,
    "n_heads": 2,
    "teacher": "meanpool",
}


def random_corpus(n_clips: int = 8, n_noise: int = 2, seed: int = 0, n_frames: int = 30) -> LoadedCorpus:
    """Random log-mel-like spectrograms with two planted classes."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_clips) % 2
    speech = []
    for label in labels:
        values = rng.normal(-5.0, 1.0, size=(16, n_frames))
        values[:8] += 3.0 * label
        speech.append(
            LogMelSpectrogram(values=torch.tensor(values, dtype=torch.float32), config=TINY_FRONTEND)
        )
    noise = [
        LogMelSpectrogram(
            values=torch.tensor(rng.normal(-6.0, 1.0, size=(16, 40)), dtype=torch.float32),
            config=TINY_FRONTEND,
        )
        for _ in range(n_noise)
    ]
    return LoadedCorpus(
        name="random",
        clip_ids=[f"clip_{i:04d}" for i in range(n_clips)],
        speech=speech,
        noise_ids=[f"noise_{i:04d}" for i in range(n_noise)],
        noise=noise,
        labels={"pitch": labels.astype(np.int64)},
    )


@pytest.fixture
def corpus() -> LoadedCorpus:
    return random_corpus()
