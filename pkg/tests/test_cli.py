import dataclasses
import json

import pytest

from goalsift import cli, envs
from goalsift.config import ConfigError, RunConfig, config_from_dict, load_config, save_config


TINY = dict(
    run_id="tiny", family="quest", width=6, height=6, difficulty=0.3,
    n_train_tasks=2, total_interactions=600, snapshot_every=300,
    seeds=[0, 1], n_sim=2, eval_pairs_per_category=5, batch_size=16,
    out_dir="runs",
)


def write_config(tmp_path, **overrides):
    data = {**TINY, **overrides}
    p = tmp_path / "config.json"
    p.write_text(json.dumps(data))
    return p


def test_config_rejects_unknown_keys(tmp_path):
    p = write_config(tmp_path, bogus_knob=3)
    with pytest.raises(ConfigError, match="bogus_knob"):
        load_config(p)


def test_config_field_validation():
    with pytest.raises(ConfigError, match="difficulty"):
        config_from_dict({"difficulty": 1.5})
    with pytest.raises(ConfigError, match="relabel_mix"):
        config_from_dict({"relabel_mix": "nope"})
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_dict({"schema_version": 99})


def test_config_round_trip(tmp_path):
    cfg = config_from_dict(TINY)
    p = tmp_path / "cfg.json"
    save_config(cfg, p)
    assert load_config(p) == cfg


def test_gen_tasks_writes_loadable_files(tmp_path, monkeypatch):
    monkeypatch.setenv("GOALSIFT_OUT_ROOT", str(tmp_path))
    p = write_config(tmp_path, seeds=[0])
    assert cli.main(["gen-tasks", "--config", str(p)]) == 0
    files = sorted((tmp_path / "runs" / "tiny" / "tasks-seed0").glob("*.task"))
    assert len(files) == TINY["n_train_tasks"]
    task = envs.load_task(files[0])
    assert task.family is envs.Family.QUEST


def test_train_determinism_byte_identical(tmp_path, monkeypatch):
    p = write_config(tmp_path, seeds=[0], total_interactions=400, snapshot_every=200)
    monkeypatch.setenv("GOALSIFT_OUT_ROOT", str(tmp_path / "a"))
    assert cli.main(["train", "--config", str(p)]) == 0
    monkeypatch.setenv("GOALSIFT_OUT_ROOT", str(tmp_path / "b"))
    assert cli.main(["train", "--config", str(p)]) == 0
    a = (tmp_path / "a" / "runs" / "tiny" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "runs" / "tiny" / "metrics.csv").read_bytes()
    assert a == b
    ea = (tmp_path / "a" / "runs" / "tiny" / "evaluator-seed0.json").read_bytes()
    eb = (tmp_path / "b" / "runs" / "tiny" / "evaluator-seed0.json").read_bytes()
    assert ea == eb


def test_cli_oracle_matches_hand_dp(tmp_path, monkeypatch):
    rows = ["..G" + "L", "LLLL", "LLLL", "LLLL"]
    task = envs.GridTask(envs.Family.NAV, 4, 4, 0.0, 0, envs.InitMode.ALL_NONTERMINAL,
                         tuple(rows), "corridor")
    task_file = tmp_path / "corridor.task"
    envs.save_task(task, task_file)
    out = tmp_path / "table.csv"
    assert cli.main(["oracle", "--task", str(task_file), "--policy", "greedy_to_target",
                     "--target", "2,0,1,1", "--support", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["state_index", "target_key"]
    space = envs.state_space(envs.load_task(task_file))
    src = space.index_by_emb[(0, 0, 1, 1)]
    row = lines[1 + src].split(",")
    # greedy policy reaches the goal cell in exactly two steps
    assert [float(v) for v in row[2:]] == [0.0, 1.0, 0.0, 0.0]


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3
    assert "selftest: PASS" in out


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["train", "--config", str(p)]) == 2


def test_eval_runs_ood(tmp_path, monkeypatch):
    monkeypatch.setenv("GOALSIFT_OUT_ROOT", str(tmp_path))
    p = write_config(tmp_path, seeds=[0], total_interactions=300, snapshot_every=300)
    assert cli.main(["train", "--config", str(p)]) == 0
    ckpt = tmp_path / "runs" / "tiny" / "evaluator-seed0.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--config", str(p),
                     "--difficulties", "0.25", "--n-per", "2"]) == 0
    lines = (tmp_path / "runs" / "tiny" / "ood.csv").read_text().splitlines()
    assert lines[0] == "run_id,seed,step,metric,key,value"
    keys = {line.split(",")[4] for line in lines[1:]}
    assert {"checkpoint:pooled", "random:pooled", "optimal:pooled"} <= keys