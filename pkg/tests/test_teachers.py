"""
Unit tests for the frozen teachers.
"""

import numpy as np
import pytest
import torch

from src.errors import ConfigError, InvalidInputError
from src.frontend import FrontendConfig, LogMelSpectrogram, save_feature_archive
from src.teachers import (
    ArchiveTeacher,
    MeanPoolTeacher,
    RandomEncoderTeacher,
    build_teacher,
    teacher_forward,
)


def _archive(tmp_path, stride_ms: float = 20.0):
    directory = tmp_path / "teacher"
    features = {"clip_0000": np.arange(30, dtype=np.float32).reshape(10, 3)}
    save_feature_archive(directory, features)
    (directory / "teacher.txt").write_text(f"frame_stride_ms={stride_ms}\nname=exported\n")
    return directory


class TestMeanPoolTeacher:
    """Tests for MeanPoolTeacher."""

    def test_pooling(self):
        """Test frames are averaged in pairs and the tail is dropped."""
        clean = torch.arange(14, dtype=torch.float32).reshape(1, 2, 7)
        h = MeanPoolTeacher(n_mels=2, k=2)(clean)
        assert tuple(h.shape) == (1, 3, 2)
        assert h[0, 0].tolist() == [0.5, 7.5]

    def test_stride_and_width(self):
        """Test the declared stride and feature width."""
        teacher = MeanPoolTeacher(n_mels=80, k=4, hop_ms=10.0)
        assert teacher.frame_stride_ms == 40.0
        assert teacher.feature_dim == 80


class TestBuildTeacher:
    """Tests for build_teacher function."""

    def test_spellings(self, tmp_path):
        """Test every supported teacher spelling."""
        assert build_teacher("none") is None
        assert build_teacher("meanpool").frame_stride_ms == 20.0
        assert build_teacher("meanpool-4").frame_stride_ms == 40.0
        assert build_teacher("random").feature_dim == 64
        assert build_teacher(f"archive:{_archive(tmp_path)}").name == "exported"

    def test_unknown(self):
        """Test unknown spellings are rejected."""
        with pytest.raises(ConfigError):
            build_teacher("hubert")
        with pytest.raises(ConfigError):
            build_teacher("meanpool-x")

    def test_frozen(self):
        """Test teachers come back frozen and in eval mode."""
        teacher = build_teacher("random")
        assert not teacher.training
        assert all(not p.requires_grad for p in teacher.parameters())


class TestRandomEncoderTeacher:
    """Tests for RandomEncoderTeacher."""

    def test_seeded(self):
        """Test the same seed gives the same features."""
        clean = torch.randn(2, 16, 8)
        a = RandomEncoderTeacher(n_mels=16, dim=8, heads=2, seed=1).eval()
        b = RandomEncoderTeacher(n_mels=16, dim=8, heads=2, seed=1).eval()
        assert torch.equal(teacher_forward(a, clean), teacher_forward(b, clean))
        assert teacher_forward(a, clean).shape == (2, 4, 8)


class TestArchiveTeacher:
    """Tests for ArchiveTeacher."""

    def test_crop_follows_offset(self, tmp_path):
        """Test features are cropped at the speech crop offset."""
        teacher = ArchiveTeacher(_archive(tmp_path))
        h = teacher(torch.zeros(1, 4, 8), ["clip_0000"], [4])
        assert h[0, :, 0].tolist() == [6.0, 9.0, 12.0, 15.0]

    def test_wraps_around(self, tmp_path):
        """Test crops past the end wrap like loop-padded speech."""
        teacher = ArchiveTeacher(_archive(tmp_path))
        h = teacher(torch.zeros(1, 4, 8), ["clip_0000"], [16])
        assert h[0, :, 0].tolist() == [24.0, 27.0, 0.0, 3.0]

    def test_unknown_clip(self, tmp_path):
        """Test clips missing from the archive are rejected."""
        teacher = ArchiveTeacher(_archive(tmp_path))
        with pytest.raises(InvalidInputError):
            teacher(torch.zeros(1, 4, 8), ["clip_9999"], [0])

    def test_missing_info(self, tmp_path):
        """Test an archive without teacher.txt is rejected."""
        save_feature_archive(tmp_path / "bare", {"clip_0000": np.zeros((4, 3))})
        with pytest.raises(FileNotFoundError):
            ArchiveTeacher(tmp_path / "bare")


class TestTeacherForward:
    """Tests for teacher_forward function."""

    def test_unbatched_spectrogram(self):
        """Test a single spectrogram gives [T_h, D]."""
        spec = LogMelSpectrogram(values=torch.zeros(8, 10), config=FrontendConfig(n_mels=8))
        h = teacher_forward(MeanPoolTeacher(n_mels=8), spec)
        assert tuple(h.shape) == (5, 8)

    def test_no_gradient(self):
        """Test teacher outputs never carry gradient."""
        clean = torch.randn(1, 16, 8, requires_grad=True)
        h = teacher_forward(RandomEncoderTeacher(n_mels=16, dim=8, heads=2), clean)
        assert not h.requires_grad

    def test_rejects_nan(self):
        """Test non-finite inputs are rejected."""
        clean = torch.zeros(1, 8, 4)
        clean[0, 0, 0] = float("nan")
        with pytest.raises(InvalidInputError):
            teacher_forward(MeanPoolTeacher(n_mels=8), clean)
