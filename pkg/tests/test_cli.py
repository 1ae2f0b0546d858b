import filecmp
import json

import pytest

from dso2d.cli import main
from dso2d.config import PipelineConfig, dump_config, load_config, parse_config
from dso2d.errors import ConfigError

TINY = """
[run]
seed = 5
[pretrain]
n_shapes = 60
steps = 40
hidden = 16, 16
[rollout]
n_objects = 3
prompts_per_object = 2
k = 4
[finetune]
steps = 6
batch_size = 8
warmup_steps = 2
lr = 1e-3
beta = 2.0
[eval]
n_objects = 3
prompts_per_object = 2
[sweep]
steps_values = 2, 4
data_values = 0.5, 1.0
[perturb]
thetas = 0.02, 0.08
runs = 5
max_shapes = 3
[flatcut]
heights = 0.1
[curves]
n = 11
"""

STAGES = ["synth", "pretrain", "rollout", "simulate"]


def test_config_round_trip():
    cfg = parse_config(TINY)
    assert cfg.pretrain.hidden == (16, 16) and cfg.sweep.data_values == (0.5, 1.0)
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert parse_config("") == PipelineConfig()


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[run]\nsead = 1\n", "[run]\nseed = abc\n",
                                  "[rollout]\nsynthetic = maybe\n", "garbage"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_desk_config_loads():
    from pathlib import Path
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.ini")
    assert cfg.finetune.lr == 1.5e-5 and cfg.finetune.beta == 5.0


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nunknown = 1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["synth", "--workers", "0", "--out", str(tmp_path)]) == 2
    assert main(["finetune", "--beta", "-1", "--objective", "dpo", "--out", str(tmp_path)]) == 2
    assert main(["rollout", "--out", str(tmp_path / "empty")]) == 1
    assert "run `pretrain` first" in capsys.readouterr().err


def test_verify_and_curves(tmp_path):
    assert main(["verify-derivations", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "derivation_report.json").read_text())
    assert rep["passed"] and rep["max_discrepancy"] < 1e-8
    assert main(["curves", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "loss_curves.csv").read_text().splitlines()
    assert lines[0] == "m,loss_linear,loss_dpo,dloss_linear,dloss_dpo,dloss_dpo_closed_form"
    assert len(lines) == 202


def test_out_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DSO2D_OUT", str(tmp_path / "envout"))
    assert main(["curves"]) == 0
    assert (tmp_path / "envout" / "loss_curves.csv").exists()


def _pipeline(root, cfg_path, workers):
    common = ["--config", str(cfg_path), "--out", str(root), "--workers", str(workers)]
    for stage in STAGES:
        assert main([stage, *common]) == 0, stage
    for obj in ("dro", "dpo", "sft"):
        assert main(["finetune", "--objective", obj, *common]) == 0, obj
    for stage in ("eval", "perturb", "flatcut"):
        assert main([stage, *common]) == 0, stage
    assert main(["sweep", "--axis", "steps", *common]) == 0
    assert main(["sweep", "--axis", "data", *common]) == 0


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    _pipeline(root / "a", cfg, 1)
    _pipeline(root / "b", cfg, 2)
    return root / "a", root / "b"


def test_pipeline_writes_artifacts(tiny_runs):
    a, _ = tiny_runs
    for name in ("pretrain_set.jsonl", "train_prompts.jsonl", "eval_prompts.jsonl", "base.ckpt.jsonl",
                 "rollouts.jsonl", "labeled.jsonl", "manifest.json", "dso_dro.ckpt.jsonl", "dso_dpo.ckpt.jsonl",
                 "dso_sft.ckpt.jsonl", "eval_base.json", "eval_dso_dro.json", "eval_table.md", "perturb.csv",
                 "flatcut.csv", "sweep_steps.csv", "sweep_data.csv", "effective_config.ini"):
        assert (a / name).exists(), name
    man = json.loads((a / "manifest.json").read_text())
    assert man["stable"] + man["unstable"] + man["invalid"] == 24
    table = (a / "eval_table.md").read_text()
    assert all(f"| {n} |" in table for n in ("base", "dso_dro", "dso_dpo", "dso_sft"))


def test_pipeline_is_byte_identical_across_workers(tiny_runs):
    a, b = tiny_runs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    diff = [n for n in names if n != "effective_config.ini" and not filecmp.cmp(a / n, b / n, shallow=False)]
    assert diff == []


def test_frac_and_ckpt_flags(tiny_runs, tmp_path):
    a, _ = tiny_runs
    assert main(["eval", "--out", str(a), "--ckpt", str(a / "base.ckpt.jsonl"), "--config", str(a / "effective_config.ini")]) == 0
    assert main(["finetune", "--frac", "0.5", "--steps", "2", "--out", str(a)]) == 0


def test_config_hash_ignores_output_location():
    from dso2d.cli import config_hash
    a, b = parse_config(TINY), parse_config(TINY)
    b.run.out = "elsewhere"
    assert config_hash(a) == config_hash(b)
    b.rollout.k = 5
    assert config_hash(a) != config_hash(b)
