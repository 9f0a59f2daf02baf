import json
import logging
import os

import pytest
import yaml
from click.testing import CliRunner

from cuehunt.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from cuehunt.cli import cli, exit_code_for
from cuehunt.errors import CheckpointError, ConfigurationError, IngestionError, NumericalError

TINY_TRAIN = {
    "protocol": "shapes",
    "canvas": 24,
    "architecture": "tiny",
    "batch_size": 2,
    "steps": 2,
    "eval_interval": 1,
    "eval_episodes": 2,
}


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    logging.getLogger("cuehunt").handlers.clear()


@pytest.fixture
def runner():
    return CliRunner(env={"CUEHUNT_OMNIGLOT_ROOT": None})


@pytest.fixture
def trained(runner, tmp_path):
    config = tmp_path / "train.yaml"
    config.write_text(yaml.safe_dump(TINY_TRAIN))
    run_dir = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--config", str(config), "-o", str(run_dir)])
    assert result.exit_code == 0, result.output
    return run_dir


def test_exit_codes():
    assert exit_code_for(IngestionError("x", "missing")) == 3
    assert exit_code_for(ConfigurationError("bad")) == 2
    assert exit_code_for(CheckpointError("old", incompatible=True)) == 2
    assert exit_code_for(CheckpointError("corrupt")) == 1
    assert exit_code_for(NumericalError("relu", 3)) == 1


class TestGenerate:

    def test_same_seed_same_digest(self, runner, tmp_path):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(cli, ["generate", "--protocol", "shapes", "--count", "3", "--canvas", "64",
                                         "--seed", "5", "-o", str(out)])
            assert result.exit_code == 0, result.output
            digests.append(result.output.split("sha256 ")[1].strip(" )\n"))
            assert (out / "manifest.yaml").exists()
        assert digests[0] == digests[1]

    def test_omniglot_root_unset(self, runner, tmp_path):
        result = runner.invoke(cli, ["generate", "--count", "1", "-o", str(tmp_path / "out")])
        assert result.exit_code == 3
        assert "Error:" in result.output

    def test_strict_split_counts(self, runner, omniglot_factory, tmp_path):
        root = omniglot_factory()
        args = ["generate", "--count", "2", "--canvas", "64", "-o", str(tmp_path / "out")]
        strict = runner.invoke(cli, ["--omniglot-root", root] + args)
        assert strict.exit_code == 3
        relaxed = runner.invoke(cli, ["--omniglot-root", root, "--no-strict"] + args)
        assert relaxed.exit_code == 0, relaxed.output

    def test_root_from_environment(self, omniglot_factory, tmp_path):
        runner = CliRunner(env={"CUEHUNT_OMNIGLOT_ROOT": omniglot_factory()})
        result = runner.invoke(cli, ["--no-strict", "generate", "--count", "1", "--canvas", "64",
                                     "-o", str(tmp_path / "out")])
        assert result.exit_code == 0, result.output


class TestTrain:

    def test_unknown_config_key(self, runner, tmp_path):
        config = tmp_path / "train.json"
        config.write_text(json.dumps({"protocol": "shapes", "momentum": 0.9}))
        result = runner.invoke(cli, ["train", "--config", str(config), "-o", str(tmp_path / "run")])
        assert result.exit_code == 2
        assert "momentum" in result.output

    def test_outputs(self, trained):
        assert load_checkpoint(str(trained / "model.ckpt")).step == 2
        assert len((trained / "metrics.jsonl").read_text().splitlines()) == 2
        assert (trained / "training_report.html").exists()
        manifest = yaml.safe_load((trained / "manifest.yaml").read_text())
        assert manifest["config"]["steps"] == 2


class TestEval:

    def test_eval_writes_reports(self, runner, trained, tmp_path):
        out = tmp_path / "eval"
        result = runner.invoke(cli, ["eval", "--ckpt", str(trained / "model.ckpt"), "--experiment", "shapes-full",
                                     "--episodes", "4", "-o", str(out)])
        assert result.exit_code in (0, 1), result.output
        assert "shapes-full: 4 episodes" in result.output
        assert (out / "shapes-full_result.jsonl").exists()
        config = yaml.safe_load((out / "manifest.yaml").read_text())["config"]
        assert config["ckpt"] == os.path.abspath(trained / "model.ckpt")
        assert config["experiment"]["name"] == "shapes-full"
        assert config["episodes"] == 4
        assert config["predictor"] == "model"
        assert config["workers"] == 1
        assert config["hotspot_episodes"] == 0

    def test_eval_defaults_beside_checkpoint(self, runner, trained):
        result = runner.invoke(cli, ["eval", "--ckpt", str(trained / "model.ckpt"), "--experiment", "shapes-full",
                                     "--episodes", "2"])
        assert result.exit_code in (0, 1), result.output
        manifest = yaml.safe_load((trained / "eval-shapes-full" / "manifest.yaml").read_text())
        assert manifest["config"]["episodes"] == 2
        assert manifest["seeds"]["seed"] == 0
        assert (trained / "eval-shapes-full" / "shapes-full_result.jsonl").exists()

    def test_incompatible_checkpoint(self, runner, trained, tmp_path):
        ckpt = load_checkpoint(str(trained / "model.ckpt"))
        ckpt.version = FORMAT_VERSION + 1
        path = str(tmp_path / "future.ckpt")
        save_checkpoint(ckpt, path)
        result = runner.invoke(cli, ["eval", "--ckpt", path, "--experiment", "shapes-full", "--episodes", "2"])
        assert result.exit_code == 2
        assert "Error:" in result.output

    def test_corrupt_checkpoint(self, runner, trained, tmp_path):
        path = tmp_path / "corrupt.ckpt"
        blob = (trained / "model.ckpt").read_bytes()
        path.write_bytes(blob[:-10])
        result = runner.invoke(cli, ["eval", "--ckpt", str(path), "--experiment", "shapes-full", "--episodes", "2"])
        assert result.exit_code == 1
        assert "Error:" in result.output

    def test_model_needs_checkpoint(self, runner, tmp_path):
        result = runner.invoke(cli, ["eval", "--experiment", "shapes-full", "--episodes", "2", "-o", str(tmp_path)])
        assert result.exit_code == 2

    def test_unknown_experiment(self, runner):
        result = runner.invoke(cli, ["eval", "--experiment", "nope", "--predictor", "baseline"])
        assert result.exit_code == 2


class TestPickPlaceAndVisualize:

    def test_baseline_pickplace(self, runner, tmp_path):
        out = tmp_path / "pp"
        result = runner.invoke(cli, ["pickplace", "--predictor", "baseline", "--trials", "3", "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert "/3 successful" in result.output
        assert (out / "pickplace_summary.jsonl").exists()
        config = yaml.safe_load((out / "manifest.yaml").read_text())["config"]
        assert config["predictor"] == "baseline"
        assert config["ckpt"] is None
        assert config["trials"] == 3

    def test_pickplace_default_directory(self, runner, tmp_path):
        with runner.isolated_filesystem(temp_dir=tmp_path):
            result = runner.invoke(cli, ["pickplace", "--predictor", "baseline", "--trials", "2"])
            assert result.exit_code == 0, result.output
            assert os.path.exists(os.path.join("runs", "pickplace", "manifest.yaml"))
            assert os.path.exists(os.path.join("runs", "pickplace", "pickplace_summary.jsonl"))

    def test_pickplace_needs_shapes(self, runner):
        result = runner.invoke(cli, ["pickplace", "--predictor", "baseline", "--experiment", "omniglot-base"])
        assert result.exit_code == 2

    def test_visualize(self, runner, trained, tmp_path):
        out = tmp_path / "viz"
        result = runner.invoke(cli, ["visualize", "--ckpt", str(trained / "model.ckpt"),
                                     "--experiment", "shapes-full", "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert sorted(os.listdir(out / "episode_000000")) == [
            "adapt_attention.png", "alpha.png", "phi.png", "target_prediction.png",
        ]


@pytest.mark.slow
def test_selftest_passes(runner, tmp_path):
    out = tmp_path / "selftest"
    result = runner.invoke(cli, ["selftest", "--seed", "1", "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert "FAIL" not in result.output
    assert yaml.safe_load((out / "manifest.yaml").read_text())["seeds"] == {"seed": 1}
    rows = [json.loads(line) for line in (out / "selftest_results.jsonl").read_text().splitlines()]
    assert rows and all(row["passed"] for row in rows)
