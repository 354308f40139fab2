import os

import numpy as np
import pytest

from epsresnet.cli import main
from epsresnet.config import (PRESETS, RunConfig, apply_overrides, from_preset,
                              load_config, parse_config_text, serialize)
from epsresnet.errors import ConfigError


TINY = ["--set", "dataset=separable", "--set", "train_size=48",
        "--set", "val_size=16", "--set", "blocks_per_group=1",
        "--set", "base_width=4", "--set", "classes=4",
        "--set", "batch_size=16", "--set", "augment=false"]


def run_cli(*argv):
    return main(list(argv))


# --- config file handling -----------------------------------------------------


def test_serialize_parse_round_trip():
    cfg = RunConfig(dataset="separable", epsilon=1.25, epochs=7,
                    standard_milestones=(3, 5), out_dir="/tmp/x")
    text = serialize(cfg)
    again = parse_config_text(text)
    assert again == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("bogus_key = 3\n")


def test_epsilon_none_and_inf():
    cfg = parse_config_text("epsilon = none\n")
    assert cfg.epsilon is None
    cfg = parse_config_text("epsilon = inf\n")
    assert cfg.epsilon == float("inf")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("this is not a config line\n")


def test_presets():
    full = from_preset("cifar10-eps110")
    assert full.blocks_per_group == 18
    assert full.epsilon == 2.5
    assert full.standard_milestones == (82, 123)
    assert full.adaptive_milestones == (41, 61)
    assert full.batch_size == 128
    assert full.weight_decay == pytest.approx(2e-4)
    desk = from_preset("cifar10-eps20")
    assert desk.blocks_per_group == 3
    assert desk.train_size == 5000 and desk.val_size == 1000
    with pytest.raises(ConfigError, match="unknown preset"):
        from_preset("nope")


def test_preset_line_in_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = cifar10-eps20\nepochs = 3\n")
    cfg = load_config(str(path))
    assert cfg.blocks_per_group == 3 and cfg.epochs == 3


def test_validation_rules():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"epsilon": "0"}).validate()
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"dtype": "f16"}).validate()
    with pytest.raises(ConfigError):
        RunConfig(dataset="cifar10", data_dir="").validate()


# --- CLI ------------------------------------------------------------------------


def test_cli_train_writes_artifacts(tmp_path, capsys):
    out = str(tmp_path / "run")
    code = run_cli("train", "--epochs", "2", "--seed", "1", "--out", out,
                   "--epsilon", "2.5", "--quiet", *TINY)
    assert code == 0
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "checkpoint.eres"))
    resolved = open(os.path.join(out, "config.txt")).read()
    assert "epsilon = 2.5" in resolved
    assert "seed = 1" in resolved
    assert "done:" in capsys.readouterr().out


def test_cli_rejects_zero_epsilon(tmp_path, capsys):
    code = run_cli("train", "--epochs", "1", "--out", str(tmp_path / "r"),
                   "--epsilon", "0", *TINY)
    assert code == 2
    assert "epsilon" in capsys.readouterr().err


def test_cli_rejects_unknown_set_key(tmp_path, capsys):
    code = run_cli("train", "--out", str(tmp_path / "r"),
                   "--set", "nonsense=1", *TINY)
    assert code == 2


def test_cli_train_deterministic(tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = str(tmp_path / name)
        assert run_cli("train", "--epochs", "2", "--seed", "7", "--out", out,
                       "--epsilon", "0.5", "--quiet", *TINY) == 0
        outs.append(open(os.path.join(out, "metrics.csv"), "rb").read())
    assert outs[0] == outs[1]


def test_cli_locked_run_dir(tmp_path, capsys):
    out = str(tmp_path / "run")
    os.makedirs(out)
    open(os.path.join(out, ".lock"), "w").write("123")
    code = run_cli("train", "--epochs", "1", "--out", out, *TINY)
    assert code == 2
    assert "locked" in capsys.readouterr().err


def test_cli_resume(tmp_path):
    out = str(tmp_path / "run")
    assert run_cli("train", "--epochs", "1", "--seed", "3", "--out", out,
                   "--epsilon", "0.5", "--quiet", *TINY) == 0
    ckpt = os.path.join(out, "checkpoint.eres")
    out2 = str(tmp_path / "resumed")
    assert run_cli("train", "--epochs", "3", "--seed", "3", "--out", out2,
                   "--epsilon", "0.5", "--quiet", "--resume", ckpt, *TINY) == 0
    lines = open(os.path.join(out2, "metrics.csv")).read().splitlines()
    epochs = {row.split(",")[0] for row in lines[1:]}
    assert epochs == {"1", "2"}


def test_cli_sweep_needs_two_values(tmp_path, capsys):
    code = run_cli("sweep-epsilon", "--epsilon-list", "2.5",
                   "--out", str(tmp_path / "s"), *TINY)
    assert code == 2
    assert "at least 2" in capsys.readouterr().err


def test_cli_sweep_dedups_and_writes_csv(tmp_path, capsys):
    out = str(tmp_path / "sweep")
    with pytest.warns(UserWarning, match="duplicate"):
        code = run_cli("sweep-epsilon", "--epochs", "1", "--seed", "1",
                       "--out", out, "--quiet",
                       "--epsilon-list", "0.5,1000000,0.5", *TINY)
    assert code == 0
    rows = open(os.path.join(out, "sweep.csv")).read().splitlines()
    assert rows[0] == "epsilon,discard_ratio,val_error"
    assert len(rows) == 3
    assert os.path.isdir(os.path.join(out, "eps_0.5"))
    assert os.path.isdir(os.path.join(out, "eps_1e+06"))


def test_cli_eval_inspect_prune_report(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run_cli("train", "--epochs", "3", "--seed", "2", "--out", out,
                   "--epsilon", "1000000", "--quiet", *TINY) == 0
    ckpt = os.path.join(out, "checkpoint.eres")

    assert run_cli("eval", ckpt, *TINY) == 0
    assert "top-1 error" in capsys.readouterr().out

    assert run_cli("inspect", ckpt) == 0
    table = capsys.readouterr().out
    assert "group1.block1" in table and "collapsed" in table

    pruned_path = os.path.join(out, "reduced.eres")
    assert run_cli("prune", ckpt, "--out", pruned_path, "--force", *TINY) == 0
    ptxt = capsys.readouterr().out
    assert "compression ratio" in ptxt and "equivalence pass" in ptxt
    assert os.path.exists(pruned_path)
    assert os.path.exists(os.path.join(out, "reduced.report.csv"))

    assert run_cli("inspect", pruned_path) == 0
    capsys.readouterr()

    assert run_cli("eval", pruned_path, *TINY) == 0
    capsys.readouterr()

    assert run_cli("report", "--run", out) == 0
    report_out = capsys.readouterr().out
    for fig in ("training_curves.png", "discard_ratio.png",
                "gate_activity.png", "weight_collapse.png"):
        assert os.path.exists(os.path.join(out, fig)), fig
    assert "wrote" in report_out


def test_cli_eval_missing_checkpoint_is_io_error(tmp_path, capsys):
    code = run_cli("eval", str(tmp_path / "none.eres"), *TINY)
    assert code == 4


def test_cli_prune_refusal_without_force(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run_cli("train", "--epochs", "3", "--seed", "2", "--out", out,
                   "--epsilon", "1000000", "--quiet", *TINY) == 0
    code = run_cli("prune", os.path.join(out, "checkpoint.eres"),
                   "--out", str(tmp_path / "x.eres"), *TINY)
    assert code == 2
    assert "prune refused" in capsys.readouterr().err
