"""
Tests for the rawtobit command line
"""

import json

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from cli import cli
from bitcodec import deserialize
from data_pipeline import load_raw, read_srgb_png
from evaluation import psnr
from networks import RbnModel, SystemName, load_checkpoint, pad_to_multiple, save_checkpoint

TINY_RUN = {
    "_comment": "tiny RBN for command-line tests",
    "total_iters": 2,
    "batch_size": 2,
    "patch_size": 32,
    "lr_initial": 1e-3,
    "model": {
        "width": 16, "latent_channels": 8, "teacher_k": 8, "hyper_channels": 8,
        "rcag_blocks": 1, "reduction": 4, "baseline_channels": 8, "isp_width": 8, "isp_groups": 1,
    },
    "kd": {"encoder": {"enabled": False}, "decoder": {"enabled": False}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data, a split and one trained tiny RBN shared by the module"""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    base = ["--data-dir", str(root / "data"), "--out-dir", str(root / "runs")]

    result = runner.invoke(cli, base + ["prepare-data", "--count", "4", "--height", "128", "--width", "128"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, base + ["make-split"])
    assert result.exit_code == 0, result.output

    config_path = root / "tiny.json"
    config_path.write_text(json.dumps(TINY_RUN))
    result = runner.invoke(cli, base + ["train", "--system", "rbn", "--lambda", "0.0932", "--config", str(config_path)])
    assert result.exit_code == 0, result.output

    return {
        "root": root,
        "base": base,
        "config": config_path,
        "checkpoint": root / "runs" / "rbn_lambda0.0932" / "checkpoint_final.pt",
        "raw": root / "data" / "synth_0000.raw16",
        "gt": root / "data" / "synth_0000.srgb.png",
    }


@pytest.fixture
def runner():
    return CliRunner()


class TestDataCommands:
    """prepare-data, make-split, preview"""

    def test_prepared_files(self, workspace):
        data = workspace["root"] / "data"
        assert sorted(p.name for p in data.glob("*.raw16")) == [f"synth_000{i}.raw16" for i in range(4)]
        assert (data / "synth_0000.meta.json").exists()
        assert (data / "split.txt").exists()

    def test_preview(self, runner, workspace, tmp_path):
        output = tmp_path / "preview.png"
        result = runner.invoke(cli, workspace["base"] + ["preview", str(workspace["raw"]), str(output)])
        assert result.exit_code == 0, result.output
        assert output.exists()

    def test_missing_raw(self, runner, workspace, tmp_path):
        result = runner.invoke(cli, workspace["base"] + ["preview", str(tmp_path / "nope.raw16"), str(tmp_path / "x.png")])
        assert result.exit_code == 1
        assert "❌" in result.output


class TestTrainCommands:
    """train and ablate"""

    def test_train_outputs(self, workspace):
        run_dir = workspace["checkpoint"].parent
        assert workspace["checkpoint"].exists()
        assert (run_dir / "loss_log.csv").exists()
        _, config, payload = load_checkpoint(workspace["checkpoint"])
        assert config.lmbda == 0.0932
        assert payload["train_config"]["total_iters"] == 2

    def test_bad_config(self, runner, workspace, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        result = runner.invoke(cli, workspace["base"] + ["train", "--system", "rbn", "--lambda", "0.013",
                                                         "--config", str(path)])
        assert result.exit_code == 1
        assert "invalid JSON" in result.output

    def test_teacher_comp_needs_k(self, runner, workspace):
        result = runner.invoke(cli, workspace["base"] + ["train", "--system", "teacher-comp", "--lambda", "0.05",
                                                         "--config", str(workspace["config"])])
        assert result.exit_code == 1
        assert "K" in result.output

    def test_ablate_no_kd(self, runner, workspace):
        result = runner.invoke(cli, workspace["base"] + ["ablate", "--variant", "no-kd",
                                                         "--config", str(workspace["config"])])
        assert result.exit_code == 0, result.output
        assert "mean L_AT     0\n" in result.output
        assert (workspace["root"] / "runs" / "rbn_lambda0.0932_no-kd" / "attention_curves.png").exists()


    @pytest.mark.parametrize("variant, flag", [("enc-only", "--comp-teacher"), ("dec-only", "--isp-teacher")])
    def test_ablate_needs_teacher(self, runner, workspace, variant, flag):
        result = runner.invoke(cli, workspace["base"] + ["ablate", "--variant", variant,
                                                         "--config", str(workspace["config"])])
        assert result.exit_code == 2
        assert flag in result.output
        assert not (workspace["root"] / "runs" / f"rbn_lambda0.0932_{variant}").exists()


class TestCodecCommands:
    """encode and decode"""

    def test_round_trip(self, runner, workspace, tmp_path):
        stream = tmp_path / "image.rbb"
        decoded = tmp_path / "image.npy"
        result = runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]),
                                                         str(workspace["raw"]), str(stream)])
        assert result.exit_code == 0, result.output
        result = runner.invoke(cli, workspace["base"] + ["decode", str(stream), str(workspace["checkpoint"]),
                                                         str(decoded)])
        assert result.exit_code == 0, result.output

        model, config, _ = load_checkpoint(workspace["checkpoint"])
        raw = load_raw(workspace["raw"])
        expected = model.decompress(model.compress(raw.data.unsqueeze(0), config.quality_index))[0]
        array = np.load(decoded)
        assert array.shape == (128, 128, 3)
        assert array.dtype == np.float32
        assert np.allclose(array, expected.permute(1, 2, 0).numpy(), atol=1e-6)

    def test_decode_png(self, runner, workspace, tmp_path):
        stream = tmp_path / "image.rbb"
        runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]), str(workspace["raw"]), str(stream)])
        output = tmp_path / "image.png"
        result = runner.invoke(cli, workspace["base"] + ["decode", str(stream), str(workspace["checkpoint"]),
                                                         str(output), "--bit-depth", "16"])
        assert result.exit_code == 0, result.output
        assert output.exists()

    def test_report(self, runner, workspace, tmp_path):
        stream = tmp_path / "image.rbb"
        result = runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]), str(workspace["raw"]),
                                                         str(stream), "--report", "--gt", str(workspace["gt"])])
        assert result.exit_code == 0, result.output
        size = stream.stat().st_size
        assert f"{size} bytes, {8 * size / (128 * 128):.6f} bpp" in result.output
        assert "PSNR" in result.output

    def test_report_psnr_matches_evaluation(self, runner, workspace, tmp_path):
        stream = tmp_path / "image.rbb"
        result = runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]), str(workspace["raw"]),
                                                         str(stream), "--report", "--gt", str(workspace["gt"])])
        assert result.exit_code == 0, result.output
        line = next(row for row in result.output.splitlines() if "PSNR" in row)
        printed = float(line.split("PSNR")[1].split()[0])
        model, _, _ = load_checkpoint(workspace["checkpoint"])
        decoded = model.decompress(deserialize(stream.read_bytes()))[0]
        target = torch.from_numpy(read_srgb_png(workspace["gt"])).permute(2, 0, 1)
        assert printed == pytest.approx(psnr(decoded, target), abs=1e-9)

    def test_cli_matches_round_forward(self, runner, workspace, tmp_path):
        base = ["--data-dir", str(tmp_path / "data"), "--out-dir", str(tmp_path / "runs"), "--seed", "11"]
        result = runner.invoke(cli, base + ["prepare-data", "--count", "5", "--height", "96", "--width", "160",
                                            "--prefix", "fresh"])
        assert result.exit_code == 0, result.output
        model, _, _ = load_checkpoint(workspace["checkpoint"])
        for i in range(5):
            raw_path = tmp_path / "data" / f"fresh_{i:04d}.raw16"
            stream, decoded = tmp_path / f"{i}.rbb", tmp_path / f"{i}.npy"
            result = runner.invoke(cli, base + ["encode", str(workspace["checkpoint"]), str(raw_path), str(stream)])
            assert result.exit_code == 0, result.output
            result = runner.invoke(cli, base + ["decode", str(stream), str(workspace["checkpoint"]), str(decoded)])
            assert result.exit_code == 0, result.output
            x = load_raw(raw_path).data.unsqueeze(0)
            padded, _ = pad_to_multiple(x)
            with torch.no_grad():
                expected = model(padded, "round").x_hat[0, :, :96, :160].clamp(0, 1)
            array = np.load(decoded)
            assert array.shape == (96, 160, 3)
            assert np.allclose(array, expected.permute(1, 2, 0).numpy(), atol=1e-5)

    def test_wrong_latent_width(self, runner, workspace, tmp_path, tiny_config):
        stream = tmp_path / "image.rbb"
        runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]), str(workspace["raw"]), str(stream)])
        quality_index = load_checkpoint(workspace["checkpoint"])[1].quality_index
        config = tiny_config(latent_channels=12, lmbda=0.0932, quality_index=quality_index)
        other = tmp_path / "other.pt"
        save_checkpoint(other, RbnModel(config), config)
        result = runner.invoke(cli, workspace["base"] + ["decode", str(stream), str(other), str(tmp_path / "x.npy")])
        assert result.exit_code == 1
        assert "❌" in result.output
        assert "latent channels" in result.output

    def test_quality_index_mismatch(self, runner, workspace, tmp_path):
        stream = tmp_path / "image.rbb"
        runner.invoke(cli, workspace["base"] + ["encode", str(workspace["checkpoint"]), str(workspace["raw"]), str(stream)])
        model, config, _ = load_checkpoint(workspace["checkpoint"])
        shifted = config.model_copy(update={"quality_index": config.quality_index + 1})
        other = tmp_path / "shifted.pt"
        save_checkpoint(other, model, shifted)
        result = runner.invoke(cli, workspace["base"] + ["decode", str(stream), str(other), str(tmp_path / "x.npy")])
        assert result.exit_code == 1
        assert "quality index" in result.output

    def test_corrupt_stream(self, runner, workspace, tmp_path):
        stream = tmp_path / "junk.rbb"
        stream.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
        result = runner.invoke(cli, workspace["base"] + ["decode", str(stream), str(workspace["checkpoint"]),
                                                         str(tmp_path / "x.npy")])
        assert result.exit_code == 1
        assert "bad magic" in result.output


class TestEvalCommands:
    """eval-rd, plot and presets"""

    def test_eval_rd(self, runner, workspace, tmp_path):
        out_dir = tmp_path / "eval"
        result = runner.invoke(cli, ["--data-dir", str(workspace["root"] / "data"), "--out-dir", str(out_dir),
                                     "eval-rd", str(workspace["checkpoint"]), "--subset", "train", "--error-maps"])
        assert result.exit_code == 0, result.output
        assert (out_dir / "rd_points.csv").exists()
        assert (out_dir / "rd_curve.png").exists()
        assert list(out_dir.glob("error_checkpoint_final_*.png"))

    def test_eval_rd_nothing_usable(self, runner, workspace, tmp_path):
        result = runner.invoke(cli, ["--data-dir", str(workspace["root"] / "data"), "--out-dir", str(tmp_path),
                                     "eval-rd", str(tmp_path / "missing.pt"), "--subset", "train"])
        assert result.exit_code == 1

    def test_plot_loss(self, runner, workspace, tmp_path):
        log = workspace["checkpoint"].parent / "loss_log.csv"
        output = tmp_path / "loss.png"
        result = runner.invoke(cli, workspace["base"] + ["plot", "--kind", "loss", f"rbn={log}", "-o", str(output)])
        assert result.exit_code == 0, result.output
        assert output.exists()

    def test_plot_error(self, runner, workspace, tmp_path):
        output = tmp_path / "error.png"
        gt = str(workspace["gt"])
        result = runner.invoke(cli, workspace["base"] + ["plot", "--kind", "error", gt, gt, "-o", str(output)])
        assert result.exit_code == 0, result.output
        assert output.exists()

    def test_presets(self, runner, workspace):
        result = runner.invoke(cli, ["--scale", "0.001", "presets", "--system", "teacher-comp"])
        assert result.exit_code == 0, result.output
        assert "K=320" in result.output
        assert "K=192" in result.output
        assert "iters=2000" in result.output

    def test_presets_with_models(self, runner):
        result = runner.invoke(cli, ["presets", "--system", "unified", "--show-models"])
        assert result.exit_code == 0, result.output
        assert "Parameters" in result.output


@pytest.mark.slow
def test_demo(runner, tmp_path):
    result = runner.invoke(cli, ["--out-dir", str(tmp_path), "demo", "--iters", "4"])
    assert result.exit_code == 0, result.output
    assert "Demo completed" in result.output
    assert (tmp_path / "demo" / "checkpoint_final.pt").exists()
    assert torch.load(tmp_path / "demo" / "checkpoint_final.pt", weights_only=False)["config"]["system"] == SystemName.RBN.value
