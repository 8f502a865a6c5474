"""
Tests for the rate-distortion loss, presets, the learning-rate schedule
and short training runs on synthetic pairs
"""

import numpy as np
import pytest
import torch

from errors import InvalidShape, InvalidSpec, MissingK, TrainingDiverged
from monitoring import TrainingMonitor
from networks import (
    CompressionTeacher,
    IspTeacher,
    RbnModel,
    SystemName,
    build_model,
    load_checkpoint,
)
from training import (
    LOSS_LOG_COLUMNS,
    TrainConfig,
    Trainer,
    ema,
    find_preset,
    lr_at,
    rd_loss,
    read_loss_log,
    resolve_train_config,
    teacher_k_for,
    train,
    train_schedule_presets,
)


@pytest.fixture
def make_config(tiny_config):
    """Small fast TrainConfig for any system"""
    def make(system=SystemName.RBN, **overrides):
        values = dict(
            system=system,
            lmbda=0.0932,
            batch_size=2,
            total_iters=3,
            lr_initial=1e-3,
            lr_final=1e-4,
            lr_decay_iter=1000,
            patch_size=32,
            log_every=1,
            model=tiny_config(system),
        )
        if system is SystemName.TEACHER_COMP:
            values["K"] = 8
        values.update(overrides)
        return TrainConfig(**values)
    return make


class TestRdLoss:
    """L_total = L_R + lambda * 255^2 * MSE + L_AT"""

    def test_distortion_scale(self):
        gt = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
        loss = rd_loss(gt + 0.1, gt, 0.0, 16, 0.013)
        assert loss.L_D.item() == pytest.approx(650.25)
        assert loss.L_total.item() == pytest.approx(8.45325)

    def test_rate_per_pixel(self):
        gt = torch.zeros(2, 3, 10, 25)
        loss = rd_loss(gt, gt, torch.tensor(1000.0), 500, 0.5, l_at=0.25)
        assert loss.L_R.item() == pytest.approx(2.0)
        assert loss.L_total.item() == pytest.approx(2.25)
        assert loss.as_floats()["L_AT"] == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            rd_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 0.0, 16, 0.1)

    def test_bad_pixel_count(self):
        with pytest.raises(InvalidShape):
            rd_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), 0.0, 0, 0.1)

    def test_rate_only_leaves_decoder_untouched(self, tiny_config):
        model = RbnModel(tiny_config())
        raw, srgb = torch.rand(1, 4, 32, 32), torch.rand(1, 3, 64, 64)
        out = model(raw)
        rd_loss(out.x_hat, srgb, out.rate_bits, 64 * 64, 0.0).L_total.backward()
        for p in model.decoder.parameters():
            assert p.grad is None or torch.all(p.grad == 0)
        assert model.encoder.convs[0].weight.grad.abs().sum() > 0


class TestSchedule:
    """Step learning rate and iteration budgets"""

    def test_lr_boundaries(self):
        config = TrainConfig(lmbda=0.013)
        assert lr_at(0, config) == 5e-5
        assert lr_at(899_999, config) == 5e-5
        assert lr_at(900_000, config) == 5e-6
        assert lr_at(999_999, config) == 5e-6

    def test_full_budgets(self):
        presets = train_schedule_presets()
        rbn = presets["rbn"][0.013]
        assert (rbn.total_iters, rbn.lr_decay_iter, rbn.batch_size) == (1_000_000, 900_000, 8)
        teacher = presets["teacher-comp"][0.36]
        assert (teacher.total_iters, teacher.lr_decay_iter) == (2_000_000, 1_500_000)
        isp = presets["teacher-isp"][None]
        assert (isp.total_iters, isp.lr_decay_iter) == (580_000, 480_000)
        unified = presets["unified"][0.025]
        assert (unified.total_iters, unified.lr_decay_iter) == (1_600_000, 1_500_000)
        cascaded = presets["cascaded"][None]
        assert (cascaded.stage, cascaded.total_iters, cascaded.batch_size) == ("isp", 26_400, 16)
        assert cascaded.lr_decay_iter == 24_000
        joint = presets["cascaded-joint"][None]
        assert (joint.total_iters, joint.lr_initial, joint.lr_final) == (2_400, 5e-6, 5e-6)

    def test_quality_index_follows_lambda_order(self):
        rbn = train_schedule_presets()["rbn"]
        assert [p.quality_index for p in rbn.values()] == list(range(7))
        assert 0.025 not in rbn
        assert 0.36 not in train_schedule_presets()["unified"]

    def test_scale(self):
        presets = train_schedule_presets(scale=0.001)
        rbn = presets["rbn"][0.0932]
        assert (rbn.total_iters, rbn.lr_decay_iter) == (1000, 900)
        cascaded = presets["cascaded"][None]
        assert (cascaded.total_iters, cascaded.lr_decay_iter) == (26, 24)
        tiny = train_schedule_presets(scale=1e-9)["teacher-isp"][None]
        assert tiny.total_iters == 1

    def test_bad_scale(self):
        with pytest.raises(InvalidSpec):
            train_schedule_presets(scale=0)


class TestTeacherK:
    """192 channels up to lambda 0.013, 320 above"""

    @pytest.mark.parametrize("lmbda, k", [(0.0035, 192), (0.0067, 192), (0.013, 192), (0.0483, 320), (0.36, 320)])
    def test_rule(self, lmbda, k):
        assert teacher_k_for(lmbda) == k
        assert train_schedule_presets()["teacher-comp"][lmbda].K == k

    def test_explicit_k(self):
        assert teacher_k_for(0.05, 256) == 256

    def test_missing_k(self):
        with pytest.raises(MissingK):
            teacher_k_for(0.05)
        with pytest.raises(MissingK):
            resolve_train_config("teacher-comp", 0.05)

    def test_model_settings(self):
        config = resolve_train_config("teacher-comp", 0.0483)
        assert config.model_settings().teacher_k == 320


class TestResolveConfig:
    """Preset < config file < command line"""

    def test_precedence(self):
        config = resolve_train_config(
            "rbn", 0.013,
            file_values={"batch_size": 4, "seed": 3},
            cli_values={"batch_size": 2, "seed": None},
            scale=0.001,
        )
        assert config.batch_size == 2
        assert config.seed == 3
        assert config.total_iters == 1000
        assert config.quality_index == 2
        assert config.lmbda == 0.013

    def test_lambda_from_file(self):
        config = resolve_train_config("unified", file_values={"lambda": 0.025})
        assert config.lmbda == 0.025
        assert config.quality_index == 3

    def test_invalid_values(self):
        with pytest.raises(InvalidSpec):
            resolve_train_config("rbn", 0.013, file_values={"batch_size": 0})
        with pytest.raises(InvalidSpec):
            resolve_train_config("rbn", 0.013, file_values={"bogus": 1})

    def test_cascaded_stages(self):
        isp = resolve_train_config("cascaded", cli_values={"stage": "isp"})
        assert (isp.total_iters, isp.lr_decay_iter) == (26_400, 24_000)
        assert lr_at(25_000, isp) == isp.lr_final
        assert isp.distortion_only and isp.effective_lambda() == 1.0
        joint = resolve_train_config("cascaded", cli_values={"stage": "joint"})
        assert joint.lr_initial == joint.lr_final == 5e-6
        assert resolve_train_config("cascaded", 0.0483, cli_values={"stage": "joint"}).quality_index == 4
        codec = resolve_train_config("cascaded", 0.0483)
        assert codec.stage == "codec" and codec.quality_index == 4
        assert find_preset(SystemName.CASCADED, None, "codec") is None

    def test_lambda_required(self):
        with pytest.raises(InvalidSpec):
            resolve_train_config("unified", None).effective_lambda()

    def test_teacher_isp_is_distortion_only(self):
        config = resolve_train_config("teacher-isp")
        assert config.lmbda is None
        assert config.effective_lambda() == 1.0


class TestTrainer:
    """Short runs on synthetic patches"""

    @pytest.mark.parametrize("system, stage", [
        (SystemName.RBN, "codec"),
        (SystemName.UNIFIED, "codec"),
        (SystemName.TEACHER_COMP, "codec"),
        (SystemName.TEACHER_ISP, "codec"),
        (SystemName.CASCADED, "isp"),
        (SystemName.CASCADED, "codec"),
        (SystemName.CASCADED, "joint"),
    ])
    def test_every_system_trains(self, tmp_path, make_config, synthetic_pairs, system, stage):
        config = make_config(system, stage=stage)
        result = train(system, config, synthetic_pairs, tmp_path)
        assert result.checkpoint_path.exists()
        log = read_loss_log(result.loss_log_path)
        assert tuple(log) == LOSS_LOG_COLUMNS
        assert log["iter"].tolist() == [0, 1, 2]
        assert np.all(np.isfinite(log["L_total"]))
        if config.distortion_only:
            assert np.all(log["L_R"] == 0)
        else:
            assert np.all(log["L_R"] > 0)
        model, model_config, payload = load_checkpoint(result.checkpoint_path)
        assert model_config.system is system
        assert payload["iteration"] == 3
        assert payload["train_config"]["stage"] == stage

    def test_monitor_report(self, tmp_path, make_config, synthetic_pairs):
        monitor = TrainingMonitor()
        result = Trainer(make_config(), synthetic_pairs, tmp_path, monitor=monitor).train()
        assert result.monitor_report["steps"] == 3
        assert result.monitor_report["snapshots"] == 3

    def test_lr_logged(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(total_iters=4, lr_decay_iter=2)
        log = read_loss_log(train("rbn", config, synthetic_pairs, tmp_path).loss_log_path)
        assert log["lr"].tolist() == [1e-3, 1e-3, 1e-4, 1e-4]

    def test_epoch_column(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(total_iters=5)
        log = read_loss_log(train("rbn", config, synthetic_pairs, tmp_path).loss_log_path)
        # three pairs at batch 2 make two iterations per epoch
        assert log["epoch"].tolist() == [0, 0, 1, 1, 2]

    def test_no_kd_means_zero_attention_loss(self, tmp_path, make_config, tiny_config, synthetic_pairs):
        comp = CompressionTeacher(tiny_config(SystemName.TEACHER_COMP))
        isp = IspTeacher(tiny_config(SystemName.TEACHER_ISP))
        config = make_config()
        config = config.model_copy(update={"kd": config.kd.with_variant("no-kd")})
        trainer = Trainer(config, synthetic_pairs, tmp_path, comp_teacher=comp, isp_teacher=isp)
        log = read_loss_log(trainer.train().loss_log_path)
        assert np.all(log["L_AT"] == 0)
        assert np.all(log["at_enc"] > 0)

    def test_missing_teachers_disable_kd(self, tmp_path, make_config, synthetic_pairs):
        trainer = Trainer(make_config(), synthetic_pairs, tmp_path)
        assert not trainer.distiller.kd.any_enabled

    def test_diverged_run_leaves_snapshot(self, tmp_path, make_config, tiny_config, synthetic_pairs):
        model = build_model(tiny_config(SystemName.UNIFIED))
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        trainer = Trainer(make_config(SystemName.UNIFIED), synthetic_pairs, tmp_path, model=model)
        with pytest.raises(TrainingDiverged) as info:
            trainer.train()
        assert (tmp_path / "nan_snapshot.pt").exists()
        assert info.value.snapshot_path.endswith("nan_snapshot.pt")

    def test_quantiles_follow_aux_loss(self, tmp_path, make_config, synthetic_pairs):
        trainer = Trainer(make_config(), synthetic_pairs, tmp_path)
        quantiles = trainer.model.entropy.entropy_bottleneck.quantiles
        assert all(p is not quantiles for p in trainer.params)
        assert trainer.aux_optimizer is not None
        before = quantiles.detach().clone()
        trainer.train()
        assert not torch.equal(before, quantiles.detach())

    def test_no_aux_optimizer_without_bottleneck(self, tmp_path, make_config, synthetic_pairs):
        trainer = Trainer(make_config(SystemName.TEACHER_ISP), synthetic_pairs, tmp_path)
        assert trainer.aux_optimizer is None

    def test_needs_pairs(self, tmp_path, make_config):
        with pytest.raises(InvalidSpec):
            Trainer(make_config(), [], tmp_path)

    def test_deterministic(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(SystemName.UNIFIED, dtype="float64")
        first = train("unified", config, synthetic_pairs, tmp_path / "a").history
        second = train("unified", config, synthetic_pairs, tmp_path / "b").history
        assert first == second

    def test_checkpoint_reproduces_loss(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(SystemName.UNIFIED, dtype="float64")
        trainer = Trainer(config, synthetic_pairs, tmp_path)
        result = trainer.train()
        loaded, _, _ = load_checkpoint(result.checkpoint_path)
        raw = torch.stack([p[0].data for p in synthetic_pairs])[:, :, :32, :32].double()
        trainer.model.eval()
        with torch.no_grad():
            before = trainer.model(raw, "round")
            after = loaded(raw, "round")
        assert torch.equal(before.x_hat, after.x_hat)
        assert before.rate_bits.item() == after.rate_bits.item()

    def test_init_checkpoint(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(SystemName.UNIFIED)
        first = train("unified", config, synthetic_pairs, tmp_path / "a")
        resumed = Trainer(
            config.model_copy(update={"init_checkpoint": str(first.checkpoint_path)}),
            synthetic_pairs, tmp_path / "b",
        )
        loaded, _, _ = load_checkpoint(first.checkpoint_path)
        for a, b in zip(resumed.model.parameters(), loaded.parameters()):
            assert torch.equal(a, b)

    @pytest.mark.slow
    def test_unified_loss_drops(self, tmp_path, make_config, synthetic_pairs):
        config = make_config(SystemName.UNIFIED, total_iters=200, batch_size=4, log_every=50)
        history = train("unified", config, synthetic_pairs, tmp_path).history
        smoothed = ema([row["L_total"] for row in history])
        assert smoothed[-1] <= 0.7 * smoothed[9]

    @pytest.mark.slow
    def test_attention_transfer_converges(self, tmp_path, make_config, tiny_config, synthetic_pairs):
        comp = CompressionTeacher(tiny_config(SystemName.TEACHER_COMP))
        isp = IspTeacher(tiny_config(SystemName.TEACHER_ISP))
        config = make_config(total_iters=300, log_every=100)
        history = Trainer(config, synthetic_pairs, tmp_path, comp_teacher=comp, isp_teacher=isp).train().history
        at_enc = [row["at_enc"] for row in history]
        assert np.mean(at_enc[-10:]) < np.mean(at_enc[:10])
        assert all(row["L_AT"] > 0 for row in history)


def test_ema():
    assert ema([1.0, 1.0, 1.0]) == [1.0, 1.0, 1.0]
    assert ema([0.0, 10.0], decay=0.5) == [0.0, 5.0]
