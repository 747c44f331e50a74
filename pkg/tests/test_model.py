"""
Unit tests for the encoder, predictor, initialization and EMA.
"""

import pytest
import torch

from src.errors import ConfigError, ShapeMismatchError
from src.model import (
    EmaConfig,
    EncoderConfig,
    encoder_forward,
    ema_update,
    init_model,
    parameter_groups,
    predictor_forward,
)
from src.patching import MaskBatch, PatchConfig, positional_encoding, sample_mask
from src.teachers import MeanPoolTeacher

SMALL = EncoderConfig(depth=2, embed_dim=16, n_heads=2, preset="tiny")
PATCH = PatchConfig(patch_freq=8, patch_time=2, embed_dim=16)


def _model(seed: int = 0, cfg: EncoderConfig = SMALL, teacher=None):
    patch = PatchConfig(PATCH.patch_freq, PATCH.patch_time, cfg.embed_dim)
    return init_model(cfg, patch, teacher=teacher, seed=seed, n_mels=16)


class TestEncoderConfig:
    """Tests for EncoderConfig presets and validation."""

    def test_presets(self):
        """Test the tiny and base presets."""
        tiny = EncoderConfig.from_preset("tiny")
        base = EncoderConfig.from_preset("base")
        assert (tiny.depth, tiny.embed_dim, tiny.n_heads) == (4, 64, 4)
        assert (base.depth, base.embed_dim, base.n_heads) == (12, 768, 12)

    def test_preset_overrides(self):
        """Test explicit values override the preset and None is ignored."""
        cfg = EncoderConfig.from_preset("tiny", depth=2, embed_dim=None)
        assert (cfg.depth, cfg.embed_dim) == (2, 64)

    def test_unknown_preset(self):
        """Test unknown presets are rejected."""
        with pytest.raises(ConfigError):
            EncoderConfig.from_preset("huge")

    def test_heads_must_divide_width(self):
        """Test the attention head count must divide the width."""
        with pytest.raises(ConfigError):
            EncoderConfig(embed_dim=64, n_heads=5)


class TestEmaConfig:
    """Tests for EmaConfig schedules."""

    def test_constant(self):
        """Test the default decay is constant."""
        assert EmaConfig().tau_at(10, 100) == 0.996

    def test_cosine(self):
        """Test the cosine schedule moves from tau to tau_end."""
        cfg = EmaConfig(tau=0.99, tau_end=1.0, schedule="cosine")
        assert cfg.tau_at(0, 100) == pytest.approx(0.99)
        assert cfg.tau_at(50, 100) == pytest.approx(0.995)
        assert cfg.tau_at(100, 100) == pytest.approx(1.0)

    def test_out_of_range(self):
        """Test tau outside [0, 1] is rejected."""
        with pytest.raises(ConfigError):
            EmaConfig(tau=1.5)


class TestInitModel:
    """Tests for init_model function."""

    def test_seeded(self):
        """Test the same seed gives identical weights and another seed does not."""
        a, b, c = _model(3), _model(3), _model(4)
        for (name, pa), pb, pc in zip(
            a.online.named_parameters(), b.online.parameters(), c.online.parameters()
        ):
            assert torch.equal(pa, pb), name
        weight = "encoder.patch_embed.weight"
        assert not torch.equal(
            dict(a.online.named_parameters())[weight], dict(c.online.named_parameters())[weight]
        )

    def test_global_rng_untouched(self):
        """Test initialization does not consume the global torch RNG."""
        torch.manual_seed(5)
        expected = torch.rand(3)
        torch.manual_seed(5)
        _model(1)
        assert torch.equal(torch.rand(3), expected)

    def test_target_is_frozen_copy(self):
        """Test the target starts equal to the online encoder and is frozen."""
        state = _model()
        online = dict(state.online.encoder.named_parameters())
        for name, param in state.target.named_parameters():
            assert torch.equal(param, online[name])
            assert not param.requires_grad
        assert state.step == 0

    def test_layernorm_and_bias_init(self):
        """Test biases start at zero and LayerNorms as identity."""
        state = _model()
        block = state.online.encoder.transformer.blocks[0]
        assert torch.equal(block.norm1.weight, torch.ones(16))
        assert torch.equal(block.attn.to_qkv.bias, torch.zeros(48))

    def test_projection_follows_teacher(self):
        """Test the projection maps nF * d to the teacher width."""
        state = _model(teacher=MeanPoolTeacher(n_mels=16, k=2))
        assert state.online.projection.in_features == 2 * 16
        assert state.online.projection.out_features == 16
        assert all(not p.requires_grad for p in state.teacher.parameters())
        assert _model().online.projection is None

    def test_incompatible_teacher_stride(self):
        """Test a teacher whose stride does not divide the patch stride is rejected."""
        with pytest.raises(ConfigError):
            init_model(SMALL, PatchConfig(8, 4, 16), MeanPoolTeacher(16, k=3), n_mels=16)

    def test_width_mismatch(self):
        """Test patch and encoder widths must agree."""
        with pytest.raises(ConfigError):
            init_model(SMALL, PatchConfig(8, 2, 32), n_mels=16)


class TestForward:
    """Tests for encoder_forward and predictor_forward."""

    def test_hidden_states(self):
        """Test depth + 1 layer outputs with the embedding first and the output last."""
        state = _model()
        tokens = torch.randn(10, 16)
        out = encoder_forward(state.online.encoder, tokens, want_all_layers=True)
        assert out.final.shape == (10, 16)
        assert len(out.layers) == SMALL.depth + 1
        assert torch.equal(out.layers[0], tokens)
        assert torch.equal(out.layers[-1], out.final)

    def test_no_layers_by_default(self):
        """Test per-layer outputs are only kept on request."""
        out = encoder_forward(_model().online.encoder, torch.randn(2, 10, 16))
        assert out.layers is None
        assert out.final.shape == (2, 10, 16)

    def test_width_mismatch(self):
        """Test tokens of the wrong width are rejected."""
        with pytest.raises(ShapeMismatchError):
            encoder_forward(_model().online.encoder, torch.randn(10, 8))

    def test_predictor_shapes(self):
        """Test one prediction per masked position, batched or not."""
        state = _model()
        pos = positional_encoding(2, 5, 16)
        plan = sample_mask(10, 0.6, seed=0)
        z_v = torch.randn(4, 16)
        single = predictor_forward(state.online, z_v, plan, pos)
        assert single.shape == (6, 16)
        batched = predictor_forward(
            state.online, z_v.unsqueeze(0), MaskBatch.from_plans([plan]), pos
        )
        assert torch.allclose(batched[0], single, atol=1e-6)

    def test_predictor_mlp_variant(self):
        """Test the MLP predictor keeps the same interface."""
        cfg = EncoderConfig(depth=2, embed_dim=16, n_heads=2, predictor="mlp")
        state = _model(cfg=cfg)
        out = predictor_forward(
            state.online, torch.randn(4, 16), sample_mask(10, 0.6, seed=0), positional_encoding(2, 5, 16)
        )
        assert out.shape == (6, 16)

    def test_predictor_plan_mismatch(self):
        """Test visible token counts must match the plan."""
        state = _model()
        with pytest.raises(ShapeMismatchError):
            predictor_forward(
                state.online, torch.randn(5, 16), sample_mask(10, 0.6, seed=0), positional_encoding(2, 5, 16)
            )


class TestEmaUpdate:
    """Tests for ema_update function."""

    def test_tau_one_is_noop(self):
        """Test tau = 1 leaves the target unchanged."""
        target, online = _model(0).target, _model(1).online.encoder
        before = {k: v.clone() for k, v in target.state_dict().items()}
        ema_update(target, online, 1.0)
        for name, value in target.state_dict().items():
            assert torch.equal(value, before[name])

    def test_tau_zero_copies(self):
        """Test tau = 0 copies the online weights."""
        target, online = _model(0).target, _model(1).online.encoder
        ema_update(target, online, 0.0)
        for name, value in online.state_dict().items():
            assert torch.equal(target.state_dict()[name], value)

    def test_moving_average(self):
        """Test xi <- tau xi + (1 - tau) theta within 1e-12 on every float64 parameter."""
        patch = PatchConfig(PATCH.patch_freq, PATCH.patch_time, SMALL.embed_dim)
        target = init_model(SMALL, patch, seed=0, n_mels=16, dtype=torch.float64).target
        online = init_model(SMALL, patch, seed=1, n_mels=16, dtype=torch.float64).online.encoder
        for tau in (0.75, 0.996):
            before = {k: v.clone() for k, v in target.state_dict().items()}
            ema_update(target, online, tau)
            for name, value in online.state_dict().items():
                expected = tau * before[name] + (1 - tau) * value
                assert (target.state_dict()[name] - expected).abs().max().item() <= 1e-12, name

    def test_structure_mismatch(self):
        """Test parameter sets of different shapes are rejected."""
        wide = EncoderConfig(depth=2, embed_dim=32, n_heads=2)
        with pytest.raises(ShapeMismatchError):
            ema_update(_model(0).target, _model(0, cfg=wide).online.encoder, 0.5)


class TestParameterGroups:
    """Tests for parameter_groups function."""

    def test_no_decay_on_vectors_and_mask_token(self):
        """Test biases, norms and the mask token are not decayed."""
        state = _model()
        decay, no_decay = parameter_groups(state.online, 0.05)
        assert decay["weight_decay"] == 0.05
        assert no_decay["weight_decay"] == 0.0
        assert all(p.ndim >= 2 for p in decay["params"])
        assert any(p is state.online.mask_token for p in no_decay["params"])
