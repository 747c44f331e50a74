"""
Unit tests for the training objectives.
"""

import math

import pytest
import torch

from src.errors import ConfigError, ShapeMismatchError
from src.objectives import (
    MaskedPredictionBatch,
    ObjectiveConfig,
    align_teacher,
    combine_losses,
    crop_to_common,
    loss_m2d,
    loss_off,
    loss_total,
    normalized_mse,
    reassemble_frame_order,
    standardize_target,
    stride_ratio,
)
from src.patching import MaskBatch, partition, sample_mask


class TestStandardizeTarget:
    """Tests for standardize_target function."""

    def test_rows_are_standardized(self):
        """Test each row gets zero mean and unit population variance."""
        z = torch.randn(5, 32, dtype=torch.float64) * 3 + 7
        out = standardize_target(z, eps=0.0)
        assert torch.allclose(out.mean(dim=-1), torch.zeros(5, dtype=torch.float64), atol=1e-10)
        assert torch.allclose(out.var(dim=-1, unbiased=False), torch.ones(5, dtype=torch.float64))

    def test_constant_row_maps_to_zero(self):
        """Test a constant row stays finite."""
        out = standardize_target(torch.full((1, 8), 3.0))
        assert torch.equal(out, torch.zeros(1, 8))


class TestNormalizedMse:
    """Tests for normalized_mse function."""

    def test_cosine_form(self):
        """Test identical, opposite and orthogonal rows."""
        a = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        b = torch.tensor([[3.0, 0.0], [-2.0, 0.0], [0.0, 5.0]])
        assert torch.allclose(normalized_mse(a, b), torch.tensor([0.0, 4.0, 2.0]))

    def test_zero_row_counts_as_orthogonal(self):
        """Test a zero vector contributes 2 and no NaN."""
        out = normalized_mse(torch.zeros(1, 4), torch.ones(1, 4))
        assert out.tolist() == [2.0]

    def test_matches_cosine_on_random_pairs(self):
        """Test 1000 random 64-d pairs against 2 - 2 cos from plain dot products."""
        generator = torch.Generator().manual_seed(0)
        a = torch.randn(1000, 64, dtype=torch.float64, generator=generator)
        b = torch.randn(1000, 64, dtype=torch.float64, generator=generator)
        cosine = (a * b).sum(dim=-1) / (a.norm(dim=-1) * b.norm(dim=-1))
        assert (normalized_mse(a, b) - (2 - 2 * cosine)).abs().max().item() <= 1e-6

    def test_scale_invariant_on_random_pairs(self):
        """Test positive per-row scales of either side leave every row unchanged."""
        generator = torch.Generator().manual_seed(1)
        a = torch.randn(1000, 64, dtype=torch.float64, generator=generator)
        b = torch.randn(1000, 64, dtype=torch.float64, generator=generator)
        c1 = torch.rand(1000, 1, dtype=torch.float64, generator=generator) * 100 + 1e-3
        c2 = torch.rand(1000, 1, dtype=torch.float64, generator=generator) * 100 + 1e-3
        difference = normalized_mse(c1 * a, c2 * b) - normalized_mse(a, b)
        assert difference.abs().max().item() <= 1e-6

    def test_fixed_points_exact(self):
        """Test identical, antipodal and orthogonal float64 rows within 1e-9."""
        a = torch.tensor([[0.3, -1.2, 2.0, 0.0]] * 3, dtype=torch.float64)
        b = torch.stack([a[0] * 2.5, -a[1], torch.tensor([1.2, 0.3, 0.0, 5.0], dtype=torch.float64)])
        expected = torch.tensor([0.0, 4.0, 2.0], dtype=torch.float64)
        assert (normalized_mse(a, b) - expected).abs().max().item() <= 1e-9

    def test_shape_mismatch(self):
        """Test rows must align."""
        with pytest.raises(ShapeMismatchError):
            normalized_mse(torch.zeros(2, 3), torch.zeros(3, 3))


class TestStopGradient:
    """Tests that targets never receive gradient."""

    def test_loss_m2d_target_gets_no_gradient(self):
        """Test only the prediction side is differentiated."""
        pred = torch.randn(6, 8, requires_grad=True)
        target = torch.randn(6, 8, requires_grad=True)
        loss_m2d(pred, target).backward()
        assert pred.grad is not None
        assert target.grad is None

    def test_loss_off_teacher_gets_no_gradient(self):
        """Test only the student side is differentiated."""
        h = torch.randn(6, 8, requires_grad=True)
        h_hat = torch.randn(6, 8, requires_grad=True)
        loss_off(h, h_hat).backward()
        assert h_hat.grad is not None
        assert h.grad is None

    def test_loss_is_mean_over_rows(self):
        """Test the reduction is the mean of per-row values."""
        a, b = torch.randn(7, 5), torch.randn(7, 5)
        assert loss_m2d(a, b).item() == pytest.approx(normalized_mse(a, b).mean().item())


class TestMaskedPredictionBatch:
    """Tests for MaskedPredictionBatch."""

    def test_from_target_standardizes(self):
        """Test the standardized targets are computed from the raw target rows."""
        z_m = torch.randn(2, 6, 8) * 4 + 1
        batch = MaskedPredictionBatch.from_target(torch.randn(2, 6, 8), z_m)
        assert torch.equal(batch.z_m, z_m)
        assert torch.allclose(batch.z_tilde_m, standardize_target(z_m))

    def test_rows_must_align(self):
        """Test predictions and targets of different shapes are rejected."""
        with pytest.raises(ShapeMismatchError):
            MaskedPredictionBatch.from_target(torch.randn(5, 8), torch.randn(6, 8))


class TestReassembleFrameOrder:
    """Tests for reassemble_frame_order function."""

    def test_frame_concatenation(self):
        """Test each frame concatenates its frequency patches in order."""
        n_freq, n_time, dim = 2, 3, 2
        full = torch.arange(n_freq * n_time, dtype=torch.float32).unsqueeze(-1).repeat(1, dim)
        plan = sample_mask(n_freq * n_time, 0.5, seed=1)
        z_v, masked_index = partition(full, plan)
        frames = reassemble_frame_order(z_v, full[masked_index], plan, (n_freq, n_time))
        assert tuple(frames.shape) == (3, 4)
        assert frames[1].tolist() == [2.0, 2.0, 3.0, 3.0]

    def test_batched(self):
        """Test a MaskBatch gives [B, nT, nF * d]."""
        plans = [sample_mask(8, 0.5, seed=s) for s in range(2)]
        masks = MaskBatch.from_plans(plans)
        frames = reassemble_frame_order(torch.randn(2, 4, 3), torch.randn(2, 4, 3), masks, (2, 4))
        assert tuple(frames.shape) == (2, 4, 6)

    def test_grid_mismatch(self):
        """Test rows must fill the grid."""
        plan = sample_mask(6, 0.5, seed=0)
        with pytest.raises(ShapeMismatchError):
            reassemble_frame_order(torch.randn(3, 2), torch.randn(3, 2), plan, (2, 4))


class TestTeacherAlignment:
    """Tests for stride_ratio, align_teacher and crop_to_common."""

    def test_stride_ratio(self):
        """Test pooling, identity and repetition ratios."""
        assert stride_ratio(40.0, 20.0) == ("pool", 2)
        assert stride_ratio(20.0, 20.0) == ("pool", 1)
        assert stride_ratio(20.0, 40.0) == ("repeat", 2)

    def test_incompatible_strides(self):
        """Test non-integer ratios are a configuration error."""
        with pytest.raises(ConfigError):
            stride_ratio(30.0, 20.0)

    def test_block_mean(self):
        """Test pooling averages k frames and drops the tail."""
        h = torch.arange(10, dtype=torch.float32).reshape(5, 2)
        aligned = align_teacher(h, 40.0, 20.0)
        assert aligned.tolist() == [[1.0, 2.0], [5.0, 6.0]]

    def test_repeat(self):
        """Test a coarser teacher is repeated."""
        h = torch.tensor([[1.0], [2.0]])
        assert align_teacher(h, 20.0, 40.0).flatten().tolist() == [1.0, 1.0, 2.0, 2.0]

    def test_crop_to_common(self):
        """Test trailing frames are dropped on the longer side."""
        aligned = crop_to_common(torch.zeros(104, 8), torch.zeros(52, 8))
        assert aligned.h.shape == aligned.h_hat.shape == (52, 8)


class TestCombination:
    """Tests for ObjectiveConfig, combine_losses and loss_total."""

    def test_weights_cannot_both_be_zero(self):
        """Test a config with no active loss is rejected."""
        with pytest.raises(ConfigError):
            ObjectiveConfig(lambda_m2d=0.0, lambda_off=0.0)

    def test_negative_weight(self):
        """Test negative weights are rejected."""
        with pytest.raises(ConfigError):
            ObjectiveConfig(lambda_m2d=-1.0)

    def test_weighted_sum(self):
        """Test the total is the weighted sum."""
        out = loss_total(ObjectiveConfig(lambda_m2d=1.0, lambda_off=0.5), 0.4, 0.8)
        assert out.l_total == pytest.approx(0.8)
        assert (out.lambda_m2d, out.lambda_off) == (1.0, 0.5)

    def test_zero_weight_skips_term(self):
        """Test a zero-weighted term is skipped, even when not finite."""
        cfg = ObjectiveConfig(lambda_m2d=0.0, lambda_off=1.0)
        assert combine_losses(cfg, math.nan, 0.3) == pytest.approx(0.3)
        assert combine_losses(cfg, None, 0.3) == pytest.approx(0.3)
