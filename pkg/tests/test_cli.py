"""Command-line behavior: config parsing strictness, exit codes, manifest
hashing, and replayability of every subcommand on a miniature pipeline."""

import json

import numpy as np
import pytest

from auxvae import cli
from auxvae import datagen as dg


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generate a small galaxy dataset and train a small model once."""
    root = tmp_path_factory.mktemp("cliws")
    gen_cfg = write(root / "gen.ini", """
[dataset]
kind = galaxy
n = 64
seed = 3
""")
    assert cli.main(["generate", "--config", gen_cfg,
                     "--out", str(root / "data")]) == 0
    train_cfg = write(root / "train.ini", f"""
[train]
dataset = {root}/data/galaxy.axvd
case = case2
d_z = 6
hidden = 24,12
beta = 1.0
lambda1 = 0.5
lambda2 = 0.1
batch_size = 16
epochs = 3
seed = 1
""")
    assert cli.main(["train", "--config", train_cfg,
                     "--out", str(root / "run")]) == 0
    return root


class TestGenerate:
    def test_manifest_hashes_output(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        out = str(workspace / "data" / "galaxy.axvd")
        assert out in manifest["outputs"]
        assert len(manifest["outputs"][out]) == 64

    def test_same_seed_same_hash(self, workspace, tmp_path):
        cfg = write(tmp_path / "gen.ini", "[dataset]\nkind = galaxy\nn = 64\nseed = 3\n")
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
        a = json.loads((workspace / "data" / "manifest.json").read_text())
        b = json.loads((tmp_path / "manifest.json").read_text())
        assert list(a["outputs"].values()) == list(b["outputs"].values())

    def test_invalid_kind_exits_2(self, tmp_path, capsys):
        cfg = write(tmp_path / "gen.ini", "[dataset]\nkind = cifar\nn = 64\n")
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "cifar" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = write(tmp_path / "gen.ini", "[dataset]\nkind = galaxy\nn = 64\nbeta = 3\n")
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "beta" in capsys.readouterr().err

    def test_missing_config_exits_3(self, tmp_path):
        assert cli.main(["generate", "--config", str(tmp_path / "nope.ini"),
                         "--out", str(tmp_path)]) == 3


class TestTrain:
    def test_checkpoint_and_log_written(self, workspace):
        manifest = json.loads((workspace / "run" / "manifest.json").read_text())
        assert str(workspace / "run" / "model.axvc") in manifest["outputs"]
        assert str(workspace / "run" / "training_log.csv") in manifest["outputs"]

    def test_case2_selects_important_factors(self, workspace):
        from auxvae import trainer
        ckpt = trainer.load_checkpoint(workspace / "run" / "model.axvc")
        assert ckpt.config.aux_factor_names() == ["radius", "g1", "g2"]
        assert ckpt.arch.d_aux == 3

    def test_replay_reproduces_artifacts(self, workspace, tmp_path):
        manifest = json.loads((workspace / "run" / "manifest.json").read_text())
        cfg = write(tmp_path / "train.ini", f"""
[train]
dataset = {workspace}/data/galaxy.axvd
case = case2
d_z = 6
hidden = 24,12
beta = 1.0
lambda1 = 0.5
lambda2 = 0.1
batch_size = 16
epochs = 3
seed = 1
""")
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "rerun")]) == 0
        redo = json.loads((tmp_path / "rerun" / "manifest.json").read_text())
        assert sorted(manifest["outputs"].values()) == sorted(redo["outputs"].values())

    def test_seed_flag_overrides(self, workspace, tmp_path):
        cfg = write(tmp_path / "train.ini", f"""
[train]
dataset = {workspace}/data/galaxy.axvd
case = case2
d_z = 6
hidden = 24,12
batch_size = 16
epochs = 1
seed = 1
""")
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "s9"),
                         "--seed", "9"]) == 0
        from auxvae import trainer
        ckpt = trainer.load_checkpoint(tmp_path / "s9" / "model.axvc")
        assert ckpt.seed == 9


class TestEvaluate:
    def test_metrics_csv_and_bounds(self, workspace, tmp_path, capsys):
        cfg = write(tmp_path / "eval.ini", f"""
[evaluate]
checkpoint = {workspace}/run/model.axvc
dataset = {workspace}/data/galaxy.axvd
split = test
""")
        assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 0
        text = (tmp_path / "metrics.csv").read_text()
        lds = float([l for l in text.splitlines() if l.startswith("lds,")][0].split(",")[1])
        assert 1.0 / 6 - 1e-9 <= lds <= 1.0


class TestExperimentsCommands:
    def test_traverse(self, workspace, tmp_path):
        cfg = write(tmp_path / "trav.ini", f"""
[traverse]
checkpoint = {workspace}/run/model.axvc
dataset = {workspace}/data/galaxy.axvd
latent_index = 0
steps = 4
""")
        assert cli.main(["traverse", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert (tmp_path / "traverse_z0.pgm").exists()
        assert (tmp_path / "traverse_z0.csv").exists()

    def test_perturb(self, workspace, tmp_path):
        cfg = write(tmp_path / "pert.ini", f"""
[perturb]
checkpoint = {workspace}/run/model.axvc
dataset = {workspace}/data/galaxy.axvd
target = none,aux,recon
count = 6
""")
        assert cli.main(["perturb", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "perturbation_ssim.csv").read_text().splitlines()
        assert lines[0] == "target,image,ssim"
        assert len(lines) == 1 + 3 * 6

    def test_attack(self, workspace, tmp_path):
        cfg = write(tmp_path / "atk.ini", f"""
[attack]
checkpoint = {workspace}/run/model.axvc
dataset = {workspace}/data/galaxy.axvd
epsilons = 0,0.05
""")
        assert cli.main(["attack", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "fgsm_ssim.csv").read_text().splitlines()
        assert lines[0] == "epsilon,image,ssim"

    def test_gridsearch_single_cell(self, workspace, tmp_path):
        cfg = write(tmp_path / "grid.ini", f"""
[train]
dataset = {workspace}/data/galaxy.axvd
case = case2
d_z = 6
hidden = 24,12
batch_size = 16
epochs = 1
seed = 1

[grid]
beta = 1.0
""")
        assert cli.main(["gridsearch", "--config", cfg, "--out", str(tmp_path)]) == 0
        best = json.loads((tmp_path / "best_config.json").read_text())
        assert best["beta"] == 1.0
        assert (tmp_path / "grid.csv").exists()


class TestConfigStrictness:
    def test_unknown_section(self, tmp_path):
        cfg = write(tmp_path / "c.ini", "[dataset]\nkind = galaxy\nn = 64\n\n[extra]\nx = 1\n")
        with pytest.raises(cli.ConfigError, match="section"):
            cli.load_config(cfg)

    def test_missing_required_section_exits_2(self, tmp_path):
        cfg = write(tmp_path / "c.ini", "[dataset]\nkind = galaxy\nn = 64\n")
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
