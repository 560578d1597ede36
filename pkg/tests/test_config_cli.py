import json

import pytest

from taskmerge.cli import main
from taskmerge.config import (default_config_text, output_root, read_config,
                              scenario_config)
from taskmerge.errors import DomainError

TINY = """
[scenario]
seeds = 0
hidden_dims = 16
methods = task_arithmetic,tsvm
include_mtl = false

[dataset]
n_train = 100
n_test = 120
n_unlabeled = 64
n_pretrain_per_task = 80

[train]
steps = 30
warmup_steps = 3
batch_size = 32

[pretrain]
steps = 60
warmup_steps = 5

[distac]
steps = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_parse_and_override(cfg_file):
    cfg = scenario_config(read_config(cfg_file, ["merge.ties_keep_fraction=0.3",
                                                 "scenario.smoothing_alpha=0.05"]))
    assert cfg.seeds == (0,) and cfg.hidden_dims == (16,)
    assert cfg.methods == ("task_arithmetic", "tsvm") and cfg.include_mtl is False
    assert cfg.dataset.n_train == 100 and cfg.train.steps == 30 and cfg.pretrain.steps == 60
    assert cfg.distac is not None and cfg.distac.steps == 8 and cfg.distac.beta == 0.5
    assert cfg.merge.ties_keep_fraction == 0.3 and cfg.smoothing_alpha == 0.05


def test_conditioning_off_by_default_and_switchable(cfg_file):
    assert scenario_config(read_config()).distac is None
    assert scenario_config(read_config(cfg_file, ["distac.enabled=false"])).distac is None


def test_default_config_roundtrips(tmp_path):
    p = tmp_path / "d.ini"
    p.write_text(default_config_text())
    cfg = scenario_config(read_config(p))
    assert cfg.seeds == (0, 1, 2) and cfg.distac is not None and cfg.frozen_head is True


@pytest.mark.parametrize("bad", ["nosection=1", "merge.nokey=1", "train.steps=many",
                                 "weird.key=1", "scenario.include_mtl=maybe"])
def test_bad_entries(bad):
    with pytest.raises(DomainError):
        scenario_config(read_config(None, [bad]))


def test_output_root_env(monkeypatch, cfg_file):
    monkeypatch.delenv("TASKMERGE_OUT", raising=False)
    assert str(output_root(read_config(cfg_file, ["output.root=/x"]))) == "/x"
    monkeypatch.setenv("TASKMERGE_OUT", "/y")
    assert str(output_root(read_config(cfg_file, ["output.root=/x"]))) == "/y"


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_cli_pipeline(cfg_file, tmp_path, capsys):
    c = ["--config", str(cfg_file)]
    pre = tmp_path / "pre.tvck"
    assert main(["pretrain", *c, "--out", str(pre)]) == 0
    assert _json(capsys)["num_params"] > 0
    fts = []
    for t in range(4):
        fts.append(tmp_path / f"ft{t}.tvck")
        assert main(["finetune", *c, "--pretrained", str(pre), "--task", str(t),
                     "--out", str(fts[-1])]) == 0
        assert 0 <= _json(capsys)["val_accuracy"] <= 1
    assert main(["merge", *c, "--pretrained", str(pre), "--finetuned", *map(str, fts),
                 "--method", "ties"]) == 0
    out = _json(capsys)
    assert out["method"] == "ties" and len(out["per_task_val"]) == 4
    hist = tmp_path / "h.csv"
    assert main(["distac", *c, "--pretrained", str(pre), "--finetuned", str(fts[1]),
                 "--profile", "norm_mismatch", "--kappa", "0.5", "--history", str(hist),
                 "--out", str(tmp_path / "s.tvck")]) == 0
    assert "rel_norm" in _json(capsys) and hist.exists()
    assert main(["distac", *c, "--pretrained", str(pre), "--finetuned", str(fts[1]),
                 "--profile", "combined"]) == 2


def test_cli_scenario_and_report(cfg_file, tmp_path, capsys):
    out = tmp_path / "grid"
    assert main(["scenario", "--config", str(cfg_file), "--scenarios", "original,norm_mismatch",
                 "--out", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("zero_shot,reference")
    again = tmp_path / "again"
    assert main(["report", "--results", str(out / "results.json"), "--out", str(again)]) == 0
    assert (again / "table1.csv").read_bytes() == (out / "table1.csv").read_bytes()


def test_cli_theory(tmp_path, capsys):
    sweep = tmp_path / "sweep.csv"
    assert main(["theory", "--sweep", str(sweep)]) == 0
    out = _json(capsys)
    assert out["seed"] == 9 and out["task1"]["exact_delta"] > 0 and out["task2"]["exact_delta"] > 0
    assert len(sweep.read_text().splitlines()) == 5


def test_cli_errors(tmp_path, capsys):
    assert main(["merge", "--pretrained", str(tmp_path / "none.tvck"), "--finetuned", "x"]) == 2
    assert "error:" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["--print-default-config"]) == 0
    assert "[distac]" in capsys.readouterr().out
