import json

import numpy as np
import pytest
from click.testing import CliRunner

import gradcheck
from file_io import load_png, save_png, save_weights
from models import GradcheckResult, ImageU8, ModelConfig
from network import init_weights
from sscan_cli import cli


def run(*args):
    return CliRunner().invoke(cli, ["--log-level", "WARNING", *args])


def write_image(path, h, w, seed=0):
    save_png(ImageU8(data=np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)), path)


@pytest.fixture
def micro_model(tmp_path):
    """Config JSON and matching weight file for a micro network at x4."""
    cfg = ModelConfig.micro(scale=4)
    config_path = tmp_path / "micro.json"
    config_path.write_text(cfg.model_dump_json(exclude={"head_dim", "mlp_hidden"}))
    weights_path = tmp_path / "micro.sscw"
    save_weights(init_weights(cfg, seed=0), weights_path)
    return str(config_path), str(weights_path)


def test_help():
    result = run("--help")
    assert result.exit_code == 0
    for command in ("sr", "analyze", "viz-attn", "gradcheck", "train-toy", "eval", "schema"):
        assert command in result.output


def test_schema(tmp_path):
    out = tmp_path / "schema.json"
    assert run("schema", "--out", str(out)).exit_code == 0
    schema = json.loads(out.read_text())
    assert "scale" in schema["properties"]
    assert schema["additionalProperties"] is False


class TestAnalyze:
    def test_single_cell(self, tmp_path):
        out = tmp_path / "costs.csv"
        result = run("analyze", "--grid", "64x64", "--out", str(out))
        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) == 3
        assert "crossover" in result.output

    def test_default_grid(self, tmp_path):
        result = run("analyze", "--out", str(tmp_path / "costs.csv"))
        assert result.exit_code == 0
        assert "H*W = 16384" in result.output

    def test_malformed_grid(self, tmp_path):
        result = run("analyze", "--grid", "64x", "--out", str(tmp_path / "costs.csv"))
        assert result.exit_code == 1


class TestSr:
    def test_upscales_deterministically(self, tmp_path, micro_model):
        config_path, weights_path = micro_model
        write_image(tmp_path / "in.png", 32, 32)
        outputs = []
        for name in ("a.png", "b.png"):
            result = run("sr", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                         "--config", config_path, "--output", str(tmp_path / name))
            assert result.exit_code == 0, result.output
            assert "128x128" in result.output
            assert "inference top-k: 8" in result.output
            outputs.append(load_png(tmp_path / name).data)
        assert outputs[0].shape == (128, 128, 3)
        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_reports_topk_clamped_to_regions(self, tmp_path, micro_model):
        config_path, weights_path = micro_model
        write_image(tmp_path / "in.png", 8, 8)
        result = run("sr", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                     "--config", config_path, "--output", str(tmp_path / "out.png"))
        assert result.exit_code == 0, result.output
        assert "inference top-k: 4" in result.output

    def test_missing_weights(self, tmp_path, micro_model):
        config_path, _ = micro_model
        write_image(tmp_path / "in.png", 8, 8)
        result = run("sr", "--input", str(tmp_path / "in.png"), "--weights", str(tmp_path / "none.sscw"),
                     "--config", config_path, "--output", str(tmp_path / "out.png"))
        assert result.exit_code == 2

    def test_invalid_config(self, tmp_path, micro_model):
        _, weights_path = micro_model
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"scale": 7}))
        write_image(tmp_path / "in.png", 8, 8)
        result = run("sr", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                     "--config", str(bad), "--output", str(tmp_path / "out.png"))
        assert result.exit_code == 3
        assert "scale" in result.output

    def test_weights_for_another_config(self, tmp_path, micro_model):
        _, weights_path = micro_model
        write_image(tmp_path / "in.png", 8, 8)
        result = run("sr", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                     "--output", str(tmp_path / "out.png"))
        assert result.exit_code == 3


class TestVizAttn:
    def test_draws_query_and_routed_windows(self, tmp_path, micro_model):
        config_path, weights_path = micro_model
        write_image(tmp_path / "in.png", 16, 16)
        result = run("viz-attn", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                     "--config", config_path, "--window", "1,2", "--out", str(tmp_path / "viz.png"))
        assert result.exit_code == 0, result.output
        assert "drew 9 boxes" in result.output
        overlay = load_png(tmp_path / "viz.png").data
        # query window (1, 2) spans rows 4..7 and columns 8..11; its outline is red
        assert overlay[4, 8].tolist() == [255, 0, 0]

    @pytest.mark.parametrize("window", ["4,0", "a,b"])
    def test_bad_window(self, tmp_path, micro_model, window):
        config_path, weights_path = micro_model
        write_image(tmp_path / "in.png", 16, 16)
        result = run("viz-attn", "--input", str(tmp_path / "in.png"), "--weights", weights_path,
                     "--config", config_path, "--window", window, "--out", str(tmp_path / "viz.png"))
        assert result.exit_code == 1


class TestGradcheck:
    def test_tensor_ops_pass(self):
        result = run("gradcheck", "--suite", "tensor_ops")
        assert result.exit_code == 0
        assert "PASS" in result.output

    def test_failure_exits_four(self, monkeypatch):
        failing = GradcheckResult(component="tensor_ops", max_rel_error=1.0, tolerance=1e-4, checked=1)
        monkeypatch.setitem(gradcheck.SUITES, "tensor_ops", lambda seed: failing)
        result = run("gradcheck", "--suite", "tensor_ops")
        assert result.exit_code == 4
        assert "FAIL" in result.output


class TestPatchCommands:
    def test_make_patches_then_eval_against_themselves(self, tmp_path):
        out = tmp_path / "pairs"
        assert run("make-patches", "--out", str(out), "--count", "2", "--lr-size", "8").exit_code == 0
        assert len(list(out.glob("*.png"))) == 4
        same = tmp_path / "same"
        same.mkdir()
        write_image(same / "x_lr.png", 24, 24)
        write_image(same / "x_hr.png", 24, 24)
        result = run("eval", "--dir", str(same))
        assert result.exit_code == 0, result.output
        assert "PSNR inf dB" in result.output

    def test_eval_missing_mate(self, tmp_path):
        write_image(tmp_path / "lonely_lr.png", 24, 24)
        result = run("eval", "--dir", str(tmp_path))
        assert result.exit_code == 2
        assert "lonely_lr.png" in result.output

    def test_eval_empty_directory(self, tmp_path):
        assert run("eval", "--dir", str(tmp_path)).exit_code == 3

    def test_train_toy_and_sweep(self, tmp_path):
        weights = tmp_path / "toy.sscw"
        result = run("train-toy", "--synthetic", "2", "--iters", "2", "--lr", "1e-3",
                     "--weights-out", str(weights), "--loss-csv", str(tmp_path / "loss.csv"))
        assert result.exit_code == 0, result.output
        assert "loss:" in result.output
        assert len((tmp_path / "loss.csv").read_text().splitlines()) == 3

        config = tmp_path / "micro.json"
        config.write_text(json.dumps({"embed_dim": 8, "num_heads": 2, "n_sscan_blocks": 1, "n_fgca_blocks": 1,
                                      "window_size": 4, "scale": 2, "topk_train": 4, "topk_infer": 8}))
        pairs = tmp_path / "pairs"
        run("make-patches", "--out", str(pairs), "--count", "1", "--lr-size", "8")
        report = tmp_path / "sweep.json"
        result = run("sweep-topk", "--dir", str(pairs), "--weights", str(weights), "--config", str(config),
                     "--topk", "1,4", "--out", str(report))
        assert result.exit_code == 0, result.output
        assert [row["topk"] for row in json.loads(report.read_text())] == [1, 4]

    def test_train_toy_needs_one_source(self):
        assert run("train-toy", "--iters", "1").exit_code == 1
