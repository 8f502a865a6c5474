"""
Tests for attention maps, the attention-transfer loss and the distiller
"""

import pytest
import torch

from distillation import (
    AblationVariant,
    AttentionDistiller,
    AttentionPairSpec,
    KdConfig,
    KdGroupConfig,
    TeacherKind,
    attention_loss_term,
    attention_map,
    build_pairs,
    decay_weight,
    total_attention_loss,
)
from errors import InvalidShape, InvalidSpec
from networks import CompressionTeacher, IspTeacher, RbnModel, SystemName


def _loop_loss(s, t):
    s_flat = [float(v) for v in s.flatten()]
    t_flat = [float(v) for v in t.flatten()]
    s_norm = sum(v * v for v in s_flat) ** 0.5
    t_norm = sum(v * v for v in t_flat) ** 0.5
    return sum((a / s_norm - b / t_norm) ** 2 for a, b in zip(s_flat, t_flat)) / len(s_flat)


class TestAttentionMap:
    """Signed channel sums"""

    def test_signed_sum(self):
        a = torch.tensor([[[1.0, -2.0]], [[3.0, 1.0]]])
        assert attention_map(a).tolist() == [[4.0, -1.0]]

    def test_abs_mode(self):
        a = torch.tensor([[[1.0, -2.0]], [[3.0, 1.0]]])
        assert attention_map(a, abs_mode=True).tolist() == [[4.0, 3.0]]

    def test_batched(self):
        assert attention_map(torch.rand(2, 5, 3, 4)).shape == (2, 3, 4)

    def test_bad_rank(self):
        with pytest.raises(InvalidShape):
            attention_map(torch.rand(4, 4))


class TestAttentionLoss:
    """(1/N_j) || M_S/||M_S|| - M_T/||M_T|| ||^2"""

    def test_loop_oracle(self):
        s = torch.randn(6, 7, dtype=torch.float64)
        t = torch.randn(6, 7, dtype=torch.float64)
        assert attention_loss_term(s, t).item() == pytest.approx(_loop_loss(s, t), rel=1e-10)

    def test_scale_invariant(self):
        m = torch.randn(8, 8, dtype=torch.float64)
        assert attention_loss_term(3.5 * m, m).item() == pytest.approx(0.0, abs=1e-12)

    def test_opposite_maps(self):
        m = torch.randn(5, 4, dtype=torch.float64)
        assert attention_loss_term(-m, m).item() == pytest.approx(4 / 20)

    def test_zero_map_contributes_nothing(self):
        assert attention_loss_term(torch.zeros(4, 4), torch.randn(4, 4)).item() == 0.0

    def test_batch_mean(self):
        s = torch.randn(3, 4, 5, dtype=torch.float64)
        t = torch.randn(3, 4, 5, dtype=torch.float64)
        expected = sum(_loop_loss(s[i], t[i]) for i in range(3)) / 3
        assert attention_loss_term(s, t).item() == pytest.approx(expected, rel=1e-10)

    def test_teacher_gets_no_gradient(self):
        s = torch.randn(4, 4, requires_grad=True)
        t = torch.randn(4, 4, requires_grad=True)
        attention_loss_term(s, t).backward()
        assert s.grad is not None and s.grad.abs().sum() > 0
        assert t.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            attention_loss_term(torch.rand(4, 4), torch.rand(4, 5))

    def test_total_is_weighted_sum(self):
        s1, t1 = torch.randn(3, 3), torch.randn(3, 3)
        s2, t2 = torch.randn(2, 2), torch.randn(2, 2)
        expected = 2.0 * attention_loss_term(s1, t1) + 0.5 * attention_loss_term(s2, t2)
        total = total_attention_loss([(s1, t1, 2.0), (s2, t2, 0.5)])
        assert total.item() == pytest.approx(expected.item(), rel=1e-6)
        assert total_attention_loss([]).item() == 0.0


class TestSchedule:
    """alpha0 * gamma^(k^2)"""

    def test_decay_value(self):
        assert decay_weight(1e6, 0.99999, 100) == pytest.approx(904837.0, abs=0.5)

    def test_epoch_zero(self):
        assert decay_weight(1e5, 0.99999, 0) == 1e5

    def test_monotone(self):
        weights = [decay_weight(1e6, 0.99999, k) for k in range(0, 500, 50)]
        assert all(a > b for a, b in zip(weights, weights[1:]))

    def test_negative_epoch(self):
        with pytest.raises(InvalidSpec):
            decay_weight(1.0, 0.5, -1)

    def test_pair_validation(self):
        with pytest.raises(InvalidSpec):
            AttentionPairSpec("enc0", "enc0", TeacherKind.COMPRESSION, alpha0=0.0, gamma=0.5)
        with pytest.raises(InvalidSpec):
            AttentionPairSpec("enc0", "enc0", TeacherKind.COMPRESSION, alpha0=1.0, gamma=1.0)


class TestPairs:
    """Site pairing and ablation variants"""

    def test_default_pairs(self):
        pairs = build_pairs(KdConfig())
        assert len(pairs) == 9
        assert [p.teacher_kind for p in pairs].count(TeacherKind.COMPRESSION) == 4
        assert pairs[0].alpha0 == 1e6
        assert pairs[-1].alpha0 == 1e5

    @pytest.mark.parametrize("variant, count", [
        (AblationVariant.NO_KD, 0),
        (AblationVariant.ENC_ONLY, 4),
        (AblationVariant.DEC_ONLY, 5),
        (AblationVariant.ABS_ATTENTION, 9),
    ])
    def test_variants(self, variant, count):
        kd = KdConfig().with_variant(variant)
        assert len(build_pairs(kd)) == count
        assert len(build_pairs(kd, include_disabled=True)) == 9
        assert kd.any_enabled == (count > 0)

    def test_abs_variant_sets_mode(self):
        pairs = build_pairs(KdConfig().with_variant("abs-attention"))
        assert all(p.abs_mode for p in pairs)

    def test_single_group_variants_override_config(self):
        off = KdConfig().with_variant(AblationVariant.NO_KD)
        enc = off.with_variant(AblationVariant.ENC_ONLY)
        assert enc.encoder.enabled and not enc.decoder.enabled
        dec = off.with_variant(AblationVariant.DEC_ONLY)
        assert dec.decoder.enabled and not dec.encoder.enabled

    def test_variant_leaves_original(self):
        kd = KdConfig()
        kd.with_variant(AblationVariant.NO_KD)
        assert kd.encoder.enabled and kd.decoder.enabled


class TestDistiller:
    """L_AT from live teachers"""

    @pytest.fixture
    def models(self, tiny_config):
        student = RbnModel(tiny_config())
        comp = CompressionTeacher(tiny_config(SystemName.TEACHER_COMP))
        isp = IspTeacher(tiny_config(SystemName.TEACHER_ISP))
        return student, comp, isp

    def _batch(self):
        return torch.rand(2, 4, 32, 32), torch.rand(2, 3, 64, 64)

    def test_loss_and_gradients(self, models):
        student, comp, isp = models
        distiller = AttentionDistiller(KdConfig(), comp, isp)
        raw, srgb = self._batch()
        out = student(raw)
        kd = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        assert kd.l_at.item() > 0
        assert kd.at_enc > 0 and kd.at_dec > 0
        kd.l_at.backward()
        assert student.encoder.convs[0].weight.grad is not None
        assert all(p.grad is None for p in comp.parameters())
        assert all(p.grad is None for p in isp.parameters())

    def test_identical_encoder_gives_zero(self, models):
        student, comp, isp = models
        comp.encoder.load_state_dict(student.encoder.state_dict())
        distiller = AttentionDistiller(KdConfig().with_variant(AblationVariant.ENC_ONLY), comp, isp)
        raw, srgb = self._batch()
        out = student(raw)
        kd = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        assert kd.at_enc == pytest.approx(0.0, abs=1e-10)
        assert kd.l_at.item() == pytest.approx(0.0, abs=1e-3)
        assert kd.at_dec > 0

    def test_disabled_groups_still_report(self, models):
        student, comp, isp = models
        distiller = AttentionDistiller(KdConfig().with_variant(AblationVariant.NO_KD), comp, isp)
        raw, srgb = self._batch()
        out = student(raw)
        kd = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        assert kd.l_at.item() == 0.0
        assert kd.at_enc > 0 and kd.at_dec > 0

    def test_no_teachers(self, models):
        student, _, _ = models
        distiller = AttentionDistiller(KdConfig().with_variant(AblationVariant.NO_KD))
        raw, srgb = self._batch()
        out = student(raw)
        kd = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        assert kd.l_at.item() == 0.0
        assert (kd.at_enc, kd.at_dec) == (0.0, 0.0)

    def test_missing_teacher(self, models):
        _, comp, _ = models
        with pytest.raises(InvalidSpec):
            AttentionDistiller(KdConfig(), comp, None)

    def test_epoch_decays_alpha(self, models):
        student, comp, isp = models
        kd = KdConfig(encoder=KdGroupConfig(alpha0=1.0, gamma=0.5), decoder=KdGroupConfig(alpha0=1.0, gamma=0.5))
        distiller = AttentionDistiller(kd, comp, isp)
        raw, srgb = self._batch()
        out = student(raw)
        first = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        distiller.set_epoch(1)
        second = distiller(out.enc_sites, out.dec_sites, raw, srgb)
        assert distiller.state.alphas["enc0"] == 0.5
        assert second.l_at.item() == pytest.approx(first.l_at.item() / 2, rel=1e-5)
        assert second.at_enc == pytest.approx(first.at_enc, rel=1e-6)
