import json
from pathlib import Path

import pytest

from instancelab.cli import main
from instancelab.config import dump_defaults, load_config

TINY_TRAIN = """
[run]
seed = 9

[model]
kind = "corridor"
length = 5
hazard_prob = 0.4
num_modalities = 2
horizon = 12
discount = 0.9

[train]
algo = "iape"
num_subsets = 2
instances_per_subset = 2
rollout_n = 4
learning_rate = 0.003
lambda_reg = 0.0001
minibatch_episodes = 4
total_env_steps = 400
eval_every = 200
eval_episodes = 8
width = 8
instance_set_seed = 50
continual_steps = 200
continual_set_seed = 60

[eval]
test_pool_seed = 123
test_pool_size = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TRAIN)
    return str(path)


def read(path):
    return Path(path).read_bytes()


def test_dump_defaults_parses_back(tmp_path):
    text = dump_defaults()
    path = tmp_path / "defaults.toml"
    path.write_text(text)
    cfg = load_config(str(path))
    assert cfg.train.algo == "iape"


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\nalgo == ???")
    code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_unknown_algo_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[train]\nalgo = "sarsa"\n')
    code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[train]\nalgorithm = "iape"\n')
    code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2


def test_train_writes_outputs_and_is_seed_deterministic(tiny_config, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", "--config", tiny_config, "--out", str(out1)]) == 0
    assert main(["train", "--config", tiny_config, "--out", str(out2)]) == 0
    for name in ("run_log.csv", "checkpoint.json", "run.json"):
        assert (out1 / name).exists()
    assert read(out1 / "run_log.csv") == read(out2 / "run_log.csv")
    assert read(out1 / "checkpoint.json") == read(out2 / "checkpoint.json")
    manifest = json.loads((out1 / "run.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["outputs"] == ["run_log.csv", "checkpoint.json"]


def test_replay_reproduces_outputs_bitwise(tiny_config, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", "--config", tiny_config, "--out", str(out1)]) == 0
    assert main(["replay", str(out1 / "run.json"), "--out", str(out2)]) == 0
    assert read(out1 / "run_log.csv") == read(out2 / "run_log.csv")
    assert read(out1 / "checkpoint.json") == read(out2 / "checkpoint.json")


def test_evaluate_self_comparison_gives_zero_deltas(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    out = tmp_path / "eval"
    code = main(["evaluate", "--config", tiny_config, "--out", str(out),
                 "--checkpoint", f"a={run / 'checkpoint.json'}",
                 "--checkpoint", f"b={run / 'checkpoint.json'}",
                 "--base", "a", "--reference", "a"])
    assert code == 0
    rows = (out / "evaluation.csv").read_text().splitlines()
    header = rows[0].split(",")
    for line in rows[1:]:
        cells = dict(zip(header, line.split(",")))
        if cells["label"] == "b" and cells["dt_count"] not in ("", "0"):
            assert float(cells["dt_vs_base_mean"]) == 0.0
            assert float(cells["kl_to_reference_mean"]) == 0.0


def test_evaluate_requires_checkpoints(tiny_config, tmp_path):
    code = main(["evaluate", "--config", tiny_config,
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_evaluate_rejects_unknown_base_label(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    code = main(["evaluate", "--config", tiny_config,
                 "--out", str(tmp_path / "o"),
                 "--checkpoint", f"a={run / 'checkpoint.json'}",
                 "--base", "zzz"])
    assert code == 2


def test_evaluate_rejects_incompatible_checkpoint(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    other = tmp_path / "other.toml"
    other.write_text(TINY_TRAIN.replace("length = 5", "length = 6"))
    code = main(["evaluate", "--config", str(other),
                 "--out", str(tmp_path / "o"),
                 "--checkpoint", f"a={run / 'checkpoint.json'}"])
    assert code == 2


def test_continual_emits_schema_columns(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    out = tmp_path / "cont"
    code = main(["continual", "--config", tiny_config, "--out", str(out),
                 "--checkpoint", str(run / "checkpoint.json")])
    assert code == 0
    header = (out / "continual_log.csv").read_text().splitlines()[0]
    assert header.split(",")[:4] == ["step", "old_train", "new_train", "test"]
    assert (out / "continual.svg").exists()


def test_verify_exit_codes(tmp_path):
    out = tmp_path / "v"
    code = main(["verify", "eq15-degenerate", "--out", str(out), "--seed", "4"])
    assert code == 0
    report = json.loads((out / "verify_eq15-degenerate.json").read_text())
    assert report["pass"] is True
    assert {"value", "tolerance", "pass", "nodes_expanded",
            "seed"} <= set(report)


def test_dump_model_and_tree(tiny_config, tmp_path):
    out = tmp_path / "dm"
    assert main(["dump-model", "--config", tiny_config,
                 "--out", str(out)]) == 0
    doc = json.loads((out / "model.json").read_text())
    assert doc["num_actions"] == 3
    out2 = tmp_path / "dt"
    assert main(["dump-tree", "--config", tiny_config, "--out", str(out2),
                 "--instance-seed", "5", "--depth", "2"]) == 0
    tree = json.loads((out2 / "tree.json").read_text())
    assert "tree" in tree and tree["instance_seed"] == 5


def test_preset_configs_load():
    for preset in ("bandit-inf", "bandit-base-single", "corridor-iape",
                   "corridor-base", "corridor-eb", "corridor-inf",
                   "corridor-l2", "paper-scale"):
        cfg = load_config(preset)
        cfg.train.validate()


def test_missing_config_file_exits_2(tmp_path):
    code = main(["train", "--config", "/nonexistent/x.toml",
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_workers_flag_recorded(tiny_config, tmp_path):
    out = tmp_path / "w"
    assert main(["dump-model", "--config", tiny_config, "--out", str(out),
                 "--workers", "2"]) == 0
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["config"]["run"]["workers"] == 2


def test_five_algo_comparison_emits_full_table(tiny_config, tmp_path):
    algos = {"base": ("base", 1, 4, "0.0"), "l2": ("l2", 1, 4, "0.0001"),
             "eb": ("eb", 2, 2, "0.0001"), "iape": ("iape", 2, 2, "0.0001"),
             "inf": ("inf", 1, 1, "0.0001")}
    checkpoints = []
    for label, (algo, m, per, lreg) in algos.items():
        conf = TINY_TRAIN.replace('algo = "iape"', f'algo = "{algo}"')
        conf = conf.replace("num_subsets = 2", f"num_subsets = {m}")
        conf = conf.replace("instances_per_subset = 2",
                            f"instances_per_subset = {per}")
        conf = conf.replace("lambda_reg = 0.0001", f"lambda_reg = {lreg}")
        path = tmp_path / f"{label}.toml"
        path.write_text(conf)
        out = tmp_path / f"run-{label}"
        assert main(["train", "--config", str(path), "--out", str(out)]) == 0
        checkpoints += ["--checkpoint", f"{label}={out / 'checkpoint.json'}"]
    out = tmp_path / "eval5"
    code = main(["evaluate", "--config", tiny_config, "--out", str(out),
                 "--base", "base", "--reference", "inf"] + checkpoints)
    assert code == 0
    rows = (out / "evaluation.csv").read_text().splitlines()
    body = [r.split(",")[:2] for r in rows[1:]]
    assert len(body) == 10  # one row per algorithm per split
    assert {tuple(b) for b in body} == {(label, split) for label in algos
                                        for split in ("train", "test")}
