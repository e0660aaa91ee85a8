"""
Tests for the CLI main module: end-to-end commands on a tiny corpus and model.
"""

import json
from types import SimpleNamespace

import numpy as np
import pytest

import madiff.__main__ as cli
from madiff import __version__
from madiff.__main__ import _job_overrides, _read_job, _source_landmarks, main
from madiff.codecs import load_image
from madiff.dataset import load_manifest
from madiff.denoiser import load_model
from madiff.errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ValidationError

TINY_CONFIG = """
schedule:
  T: 20
  beta_start: 0.001
  beta_end: 0.2
model:
  architecture: mlp
  widths: [4, 8]
  groups: 2
  time_dim: 8
  cond_dim: 8
  mlp_hidden: 16
training:
  iterations: 3
  batch_size: 2
  warmup_steps: 1
  log_every: 0
"""


def run(*argv):
    return main(["--no-file-logs", "--quiet", *[str(a) for a in argv]])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus a trained model shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.yaml"
    config.write_text(TINY_CONFIG)
    assert run("gen-data", "--out", root / "data", "--n", 6, "--seed", 2, "--size", 16) == EXIT_OK
    assert (
        run("--config", config, "train", "--data", root / "data", "--out", root / "model.bin")
        == EXIT_OK
    )
    return root


def sprite_paths(root, domain):
    manifest = load_manifest(root / "data")
    record = next(r for r in manifest.records if r.domain == domain)
    return manifest.path(record.image), manifest.path(record.landmarks)


class TestCommands:
    """Successful runs of every subcommand."""

    def test_train_outputs(self, workspace):
        assert (workspace / "model.bin").is_file()
        lines = (workspace / "model.loss.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,lr"
        assert len(lines) == 4

    def test_translate(self, workspace):
        source, _ = sprite_paths(workspace, "non_makeup")
        out = workspace / "translated.ppm"
        code = run(
            "translate", "--model", workspace / "model.bin", "--input", source,
            "--from", "nomakeup", "--to", "makeup", "--K", 5, "--out", out,
        )
        assert code == EXIT_OK
        assert load_image(out).shape == (16, 16, 3)

    def test_translate_is_reproducible(self, workspace):
        source, _ = sprite_paths(workspace, "makeup")
        outputs = []
        for name in ("a.ppm", "b.ppm"):
            run(
                "translate", "--model", workspace / "model.bin", "--input", source,
                "--from", "makeup", "--to", "nomakeup", "--seed", 11, "--out", workspace / name,
            )
            outputs.append((workspace / name).read_bytes())
        assert outputs[0] == outputs[1]

    def test_transfer(self, workspace):
        source, source_lm = sprite_paths(workspace, "non_makeup")
        ref, ref_lm = sprite_paths(workspace, "makeup")
        out = workspace / "transfer.ppm"
        code = run(
            "transfer", "--model", workspace / "model.bin", "--source", source, "--ref", ref,
            "--lm-source", source_lm, "--lm-ref", ref_lm, "--alpha-lips", 0.5, "--out", out,
        )
        assert code == EXIT_OK
        assert np.all(np.isfinite(load_image(out)))

    def test_multi_transfer(self, mocker, workspace):
        source, _ = sprite_paths(workspace, "non_makeup")
        ref, ref_lm = sprite_paths(workspace, "makeup")
        job = workspace / "job.json"
        job.write_text(
            json.dumps(
                {
                    "source": str(source),
                    "refs": [{"image": str(ref), "landmarks": str(ref_lm), "alpha": 0.6}],
                    "K": 5,
                    "gamma": 0.0,
                    "seed": 1,
                    "cam": {"lips": 3},
                }
            )
        )
        spy = mocker.spy(cli, "multi_makeup_transfer")
        out = workspace / "multi.ppm"
        code = run("multi-transfer", "--spec", job, "--model", workspace / "model.bin", "--out", out)
        assert code == EXIT_OK
        assert out.is_file()
        opts = spy.call_args.args[3]
        assert (opts.K, opts.gamma, opts.seed) == (5, 0.0, 1)
        assert opts.t_c["lips"] == 3
        assert opts.t_c["eyes"] == 2

    def test_multi_transfer_job_extras(self, workspace):
        source, source_lm = sprite_paths(workspace, "non_makeup")
        ref, ref_lm = sprite_paths(workspace, "makeup")
        job = workspace / "job_extras.json"
        job.write_text(
            json.dumps(
                {
                    "model": "model.bin",
                    "source": str(source),
                    "source_landmarks": str(source_lm),
                    "references": [{"image": str(ref), "landmarks": str(ref_lm), "alpha": 0.6}],
                    "K": 4,
                    "cam": "off",
                }
            )
        )
        out = workspace / "multi_extras.ppm"
        assert run("multi-transfer", "--spec", job, "--out", out) == EXIT_OK
        assert out.is_file()

    def test_config_after_subcommand(self, workspace):
        out = workspace / "late_config.bin"
        code = run(
            "train", "--data", workspace / "data", "--out", out, "--config", workspace / "run.yaml"
        )
        assert code == EXIT_OK
        model = load_model(out)
        assert model.schedule.T == 20
        assert model.architecture.kind == "mlp"

    def test_paths_from_config(self, workspace, tmp_path):
        config = tmp_path / "paths.yaml"
        config.write_text(
            TINY_CONFIG
            + f"paths:\n  data: {workspace / 'data'}\n  model: {workspace / 'model.bin'}\n"
        )
        report = tmp_path / "removal.json"
        code = run("eval", "--task", "removal", "--config", config, "--report", report, "--pairs", 1)
        assert code == EXIT_OK
        assert json.loads(report.read_text())["protocol"]["task"] == "removal"

    def test_eval_removal(self, workspace):
        report = workspace / "removal.json"
        code = run(
            "eval", "--task", "removal", "--manifest", workspace / "data",
            "--model", workspace / "model.bin", "--report", report, "--pairs", 2,
        )
        assert code == EXIT_OK
        data = json.loads(report.read_text())
        assert len(data["ssim"]["per_item"]) == 2
        assert data["protocol"]["task"] == "removal"
        assert data["config"]["schedule"]["T"] == 20

    def test_sweep_k(self, workspace):
        report = workspace / "sweep.json"
        code = run(
            "sweep-k", "--model", workspace / "model.bin", "--manifest", workspace / "data",
            "--k-list", "4,2", "--report", report, "--pairs", 2,
        )
        assert code == EXIT_OK
        data = json.loads(report.read_text())
        assert [row["K"] for row in data["rows"]] == [2, 4]


class TestFailures:
    """Exit codes and the machine-parseable error prefix."""

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["--version"])
        assert exc_info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_unknown_tag(self, workspace, capsys):
        source, _ = sprite_paths(workspace, "non_makeup")
        code = run(
            "translate", "--model", workspace / "model.bin", "--input", source,
            "--from", "nomakeup", "--to", "tag:glitter_nose", "--out", workspace / "x.ppm",
        )
        assert code == EXIT_USAGE
        assert "MADIFF-E204" in capsys.readouterr().err

    def test_missing_model(self, tmp_path, capsys):
        code = run(
            "translate", "--model", tmp_path / "none.bin", "--input", tmp_path / "in.ppm",
            "--from", "nomakeup", "--to", "makeup", "--out", tmp_path / "out.ppm",
        )
        assert code == EXIT_USAGE
        assert "MADIFF-E206" in capsys.readouterr().err

    def test_k_beyond_schedule(self, workspace, capsys):
        source, _ = sprite_paths(workspace, "non_makeup")
        code = run(
            "translate", "--model", workspace / "model.bin", "--input", source,
            "--from", "nomakeup", "--to", "makeup", "--K", 50, "--out", workspace / "x.ppm",
        )
        assert code == EXIT_USAGE
        assert "exceeds" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        config = tmp_path / "bad.yaml"
        config.write_text("training:\n  iteratons: 5\n")
        code = run(
            "--config", config, "train", "--data", workspace / "data", "--out", tmp_path / "m.bin"
        )
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "MADIFF-E208" in err
        assert "training.iteratons" in err

    def test_missing_manifest(self, tmp_path, capsys):
        code = run("train", "--data", tmp_path / "empty", "--out", tmp_path / "m.bin")
        assert code == EXIT_USAGE
        assert "MADIFF-E" in capsys.readouterr().err

    def test_interrupt(self, mocker, tmp_path):
        mocker.patch.dict(
            "madiff.__main__.COMMANDS", {"gen-data": mocker.Mock(side_effect=KeyboardInterrupt)}
        )
        assert run("gen-data", "--out", tmp_path, "--n", 4) == EXIT_RUNTIME

    def test_unexpected_error(self, mocker, tmp_path, capsys):
        mocker.patch.dict(
            "madiff.__main__.COMMANDS", {"gen-data": mocker.Mock(side_effect=RuntimeError("disk"))}
        )
        assert run("gen-data", "--out", tmp_path, "--n", 4) == EXIT_RUNTIME
        assert "MADIFF-E100: RuntimeError: disk" in capsys.readouterr().err

    def test_bad_groups_is_a_config_error(self, workspace, tmp_path, capsys):
        config = tmp_path / "unet.yaml"
        config.write_text(
            "schedule:\n  T: 20\nmodel:\n  architecture: unet\n  widths: [4, 8]\n  groups: 3\n"
            "training:\n  iterations: 1\n  batch_size: 2\n"
        )
        code = run(
            "--config", config, "train", "--data", workspace / "data", "--out", tmp_path / "m.bin"
        )
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "MADIFF-E208" in err
        assert "model.groups" in err


def model_with_steps(T):
    return SimpleNamespace(schedule=SimpleNamespace(T=T))


class TestJobFile:
    """Multi-transfer job parsing and option overrides."""

    def write(self, tmp_path, job):
        path = tmp_path / "job.json"
        path.write_text(json.dumps(job))
        return path

    def test_refs(self, tmp_path):
        job = _read_job(self.write(tmp_path, {"source": "s.ppm", "refs": [{"image": "a"}]}))
        assert job["refs"] == [{"image": "a"}]

    def test_references_alias(self, tmp_path):
        job = _read_job(self.write(tmp_path, {"source": "s.ppm", "references": [{"image": "a"}]}))
        assert job["refs"] == [{"image": "a"}]

    @pytest.mark.parametrize(
        "job",
        [
            {"refs": [{}]},
            {"source": "s.ppm"},
            {"source": "s.ppm", "refs": []},
            {"source": "s.ppm", "refs": [{}], "references": [{}]},
            {"source": "s.ppm", "refs": [{}], "alphas": 0.5},
            {"source": "s.ppm", "refs": [{}], "components": ["lips.pgm"]},
        ],
    )
    def test_rejected(self, tmp_path, job):
        with pytest.raises(ValidationError):
            _read_job(self.write(tmp_path, job))

    def test_overrides(self):
        job = {"K": 7, "gamma": 0.25, "seed": 3, "cam": {"lips": 2, "eyes": 4}, "scope": "union"}
        overrides = _job_overrides(job, SimpleNamespace(seed=None), model_with_steps(20))
        assert overrides == {
            "K": 7,
            "gamma": 0.25,
            "seed": 3,
            "constraint_scope": "union",
            "t_c": {"lips": 2, "eyes": 4},
        }

    def test_cam_mode(self):
        overrides = _job_overrides({"cam": "literal"}, SimpleNamespace(seed=None), model_with_steps(20))
        assert overrides == {"cam": "literal"}

    def test_seed_flag_wins_over_job(self):
        overrides = _job_overrides({"seed": 3}, SimpleNamespace(seed=9), model_with_steps(20))
        assert "seed" not in overrides

    @pytest.mark.parametrize(
        "job",
        [
            {"K": 21},
            {"K": "5"},
            {"gamma": 1.5},
            {"gamma": True},
            {"cam": {"lips": 0}},
            {"cam": {"nose": 3}},
            {"cam": "sometimes"},
            {"cam": 3},
            {"scope": "everywhere"},
        ],
    )
    def test_bad_values(self, job):
        with pytest.raises(ValidationError):
            _job_overrides(job, SimpleNamespace(seed=None), model_with_steps(20))

    def test_landmarks_next_to_source(self, tmp_path):
        images = tmp_path / "images"
        images.mkdir()
        (tmp_path / "landmarks").mkdir()
        source = images / "sprite_0001.ppm"
        expected = tmp_path / "landmarks" / "sprite_0001.json"
        expected.write_text("{}")
        assert _source_landmarks({}, source, tmp_path) == expected

    def test_missing_landmarks(self, tmp_path):
        with pytest.raises(ValidationError):
            _source_landmarks({}, tmp_path / "s.ppm", tmp_path)
