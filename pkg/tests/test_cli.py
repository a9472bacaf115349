import dataclasses
import hashlib
import json

import numpy as np
import pytest

from marlab import cli, ndiff
from marlab.cli import (
    ChecksumMismatch,
    IncompatibleAlgoEnv,
    InvalidConfig,
    build_config,
    check_compat,
)
from marlab.envs import fixture_by_name


def _train(tmp_path, name, *flags):
    out = tmp_path / name
    rc = cli.main(["train", "--out-dir", str(out), *flags])
    return rc, out


def _read(path):
    return path.read_bytes()


# -- configuration ----------------------------------------------------------

def test_defaults_resolve_per_algo():
    cfg = build_config({"algo": "selfplay", "env": "matching_pennies"})
    assert cfg.lr == 0.05 and cfg.batch_size == 256
    cfg = build_config({"algo": "qmix"})
    assert cfg.lr == 5e-3 and cfg.hidden_sizes == [32]
    assert cfg.env == "two_step_coop"


def test_flags_beat_file_beats_defaults():
    cfg = build_config({"algo": "qmix", "lr": 0.1}, {"lr": 0.2})
    assert cfg.lr == 0.2
    cfg = build_config({"algo": "qmix", "lr": 0.1})
    assert cfg.lr == 0.1


def test_unknown_config_key_rejected():
    with pytest.raises(InvalidConfig):
        build_config({"algo": "qmix", "learning_rate": 0.1})


@pytest.mark.parametrize("bad", [
    {"lr": -1.0},
    {"lr": 0.0},
    {"epsilon_start": 1.5},
    {"epsilon_end": -0.1},
    {"tau": 0.0},
    {"total_steps": 0},
    {"batch_size": 0},
    {"gamma": 1.5},
    {"algo": "ppo"},
    {"hidden_sizes": [0]},
])
def test_invalid_values_rejected(bad):
    base = {"algo": "qmix", "env": "two_step_coop"}
    with pytest.raises(InvalidConfig):
        build_config({**base, **bad})


def test_config_file_unknown_key_exits_2(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"algo": "qmix", "nosuch": 1}))
    assert cli.main(["train", "--config", str(cfgfile)]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_unknown_flag_exits_2():
    assert cli.main(["train", "--nonsense", "1"]) == 2


def test_marlab_seed_env_var_overrides(monkeypatch):
    monkeypatch.setenv("MARLAB_SEED", "123")
    cfg = build_config({"algo": "qmix", "seed": 5})
    assert cfg.seed == 123
    monkeypatch.setenv("MARLAB_SEED", "abc")
    with pytest.raises(InvalidConfig):
        build_config({"algo": "qmix"})


# -- algo/env compatibility --------------------------------------------------

def test_qmix_needs_cooperative():
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("qmix", fixture_by_name("matching_pennies"))
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("vdn", fixture_by_name("rock_paper_scissors"))
    check_compat("iql", fixture_by_name("matching_pennies"))


def test_value_heads_need_discrete_actions():
    cts = fixture_by_name("coop_cts")
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("qmix", cts)
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("maddpg_dec", cts)
    check_compat("maddpg_ctde", cts)


def test_selfplay_and_comm_gates():
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("selfplay", fixture_by_name("coop_climb"))
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("dial", fixture_by_name("coop_climb"))
    with pytest.raises(IncompatibleAlgoEnv):
        check_compat("rial", fixture_by_name("matching_pennies"))
    check_compat("selfplay", fixture_by_name("matching_pennies"))
    check_compat("dial", fixture_by_name("signal_relay"))


def test_train_incompatible_pair_exits_2(tmp_path):
    rc, _ = _train(tmp_path, "bad", "--algo", "qmix", "--env", "matching_pennies")
    assert rc == 2


# -- train artifacts ---------------------------------------------------------

QUICK = ["--total-steps", "150", "--eval-interval", "75", "--eval-episodes", "5"]


def test_train_writes_all_artifacts(tmp_path):
    rc, out = _train(tmp_path, "run", "--algo", "vdn", "--env", "coop_climb", *QUICK)
    assert rc == 0
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.json").exists()
    assert (out / "config_echo.json").exists()


def test_metrics_header_is_exact(tmp_path):
    _, out = _train(tmp_path, "run", "--algo", "vdn", "--env", "coop_climb", *QUICK)
    first = (out / "metrics.csv").read_text().splitlines()[0]
    assert first == "step,episodes,loss,epsilon,eval_return_mean,eval_return_per_agent,extra"


def test_same_seed_metrics_byte_identical(tmp_path):
    _, a = _train(tmp_path, "a", "--algo", "qmix", "--seed", "4", *QUICK)
    _, b = _train(tmp_path, "b", "--algo", "qmix", "--seed", "4", *QUICK)
    assert _read(a / "metrics.csv") == _read(b / "metrics.csv")
    _, c = _train(tmp_path, "c", "--algo", "qmix", "--seed", "5", *QUICK)
    assert _read(a / "metrics.csv") != _read(c / "metrics.csv")


def test_config_echo_round_trip_stable(tmp_path):
    _, out = _train(tmp_path, "run", "--algo", "vdn", "--env", "coop_climb", *QUICK)
    echo = json.loads((out / "config_echo.json").read_text())
    again = build_config(echo)
    assert dataclasses.asdict(again) == echo


def test_threads_only_for_selfplay(tmp_path):
    rc, _ = _train(tmp_path, "x", "--algo", "qmix", "--threads", "2")
    assert rc == 2
    rc, a = _train(tmp_path, "sp1", "--algo", "selfplay", "--env", "matching_pennies",
                   "--seed", "7", "--threads", "3",
                   "--total-steps", "40", "--eval-interval", "20", "--eval-episodes", "50")
    assert rc == 0
    rc, b = _train(tmp_path, "sp2", "--algo", "selfplay", "--env", "matching_pennies",
                   "--seed", "7", "--threads", "3",
                   "--total-steps", "40", "--eval-interval", "20", "--eval-episodes", "50")
    assert _read(a / "metrics.csv") == _read(b / "metrics.csv")


def test_comm_run_writes_channel_csv(tmp_path):
    rc, out = _train(tmp_path, "d", "--algo", "dial", "--env", "signal_relay",
                     "--total-steps", "60", "--eval-interval", "30",
                     "--eval-episodes", "20")
    assert rc == 0
    lines = (out / "dial_metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,eval_accuracy"
    assert len(lines) == 3


def test_metrics_rows_parse_and_progress(tmp_path):
    import csv as csvmod
    _, out = _train(tmp_path, "run", "--algo", "qmix",
                    "--total-steps", "400", "--eval-interval", "100",
                    "--eval-episodes", "10")
    with open(out / "metrics.csv") as fh:
        rows = list(csvmod.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [100, 200, 300, 400]
    for r in rows:
        per_agent = json.loads(r["eval_return_per_agent"])
        assert len(per_agent) == 2
        assert float(r["eval_return_mean"]) == pytest.approx(np.mean(per_agent))
        assert int(r["episodes"]) == int(r["step"]) // 2   # two steps per episode


# -- eval subcommand ----------------------------------------------------------

def test_eval_missing_checkpoint_exits_1(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.json")]) == 1


def test_eval_detects_tampering(tmp_path):
    _, out = _train(tmp_path, "run", "--algo", "vdn", "--env", "coop_climb", *QUICK)
    blob = json.loads((out / "checkpoint.json").read_text())
    blob["payload"]["mode"] = "qmix"
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(blob))
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 1


def test_eval_rejects_truncated_checkpoint(tmp_path):
    bad = tmp_path / "half.json"
    bad.write_text(json.dumps({"algo": "vdn", "payload": {}}))
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 1
    bad.write_text("{not json")
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 1


def test_eval_greedy_policy_is_constant_on_deterministic_game(tmp_path, capsys):
    _, out = _train(tmp_path, "run", "--algo", "vdn", "--env", "coop_climb", *QUICK)
    capsys.readouterr()
    means = []
    for seed, episodes in ((0, 7), (9, 23)):
        rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                       "--episodes", str(episodes), "--seed", str(seed)])
        assert rc == 0
        means.append(json.loads(capsys.readouterr().out)["mean_return"])
    assert means[0] == means[1]
    assert (out / "eval.json").exists()


def test_eval_fresh_selfplay_policy_is_balanced(tmp_path, capsys):
    _, out = _train(tmp_path, "sp", "--algo", "selfplay", "--env", "matching_pennies",
                    "--total-steps", "5", "--eval-interval", "5",
                    "--eval-episodes", "20")
    capsys.readouterr()
    rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                   "--episodes", "4000"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert abs(summary["mean_return_per_agent"][0]) <= 0.05
    assert "win_rate_per_agent" in summary and "draw_rate" in summary


# -- oracle subcommand ---------------------------------------------------------

def _oracle_json(capsys, *argv):
    rc = cli.main(["oracle", *argv])
    out = capsys.readouterr().out
    return rc, json.loads(out)


def test_oracle_nash_pennies(capsys):
    rc, out = _oracle_json(capsys, "nash", "matching_pennies")
    assert rc == 0
    assert out == {"mix1": [0.5, 0.5], "mix2": [0.5, 0.5], "value": 0.0}


def test_oracle_argmax_coop_climb(capsys):
    rc, out = _oracle_json(capsys, "argmax", "coop_climb")
    assert rc == 0
    assert out["joint"] == [0, 0] and out["value"] == 11.0


def test_oracle_qiter_two_step(capsys):
    rc, out = _oracle_json(capsys, "qiter", "two_step_coop")
    assert rc == 0
    assert out["value_per_state"] == pytest.approx([9.9, 10.0])
    assert out["greedy_joint_per_state"] == [[0, 0], [1, 1]]


def test_oracle_bestresp(capsys):
    rc, out = _oracle_json(capsys, "bestresp", "matching_pennies",
                           "--me", "1", "--mix", "0.7,0.3")
    assert rc == 0
    assert out["action"] == 1 and out["value"] == pytest.approx(0.4)


def test_oracle_bad_fixture_exits_2():
    assert cli.main(["oracle", "nash", "no_such_game"]) == 2


def test_oracle_argmax_needs_cooperative():
    assert cli.main(["oracle", "argmax", "matching_pennies"]) == 2


# -- gradcheck subcommand --------------------------------------------------------

def test_gradcheck_reports_both_suites(capsys):
    rc = cli.main(["gradcheck", "--instances", "3"])
    report = json.loads(capsys.readouterr().out)
    assert rc == 0 and report["pass"]
    assert set(report["suites"]) == {"ndiff", "dial_bptt"}
    for suite in report["suites"].values():
        assert suite["max_rel_error"] < 1e-4


def test_gradcheck_catches_broken_activation_backward(capsys, monkeypatch):
    fw, _ = ndiff.OPS["elu"]

    def bad_bw(ctx, vals, g):
        (x,) = vals
        return (g * np.where(x >= 0.0, 1.0, -np.exp(x)),)

    monkeypatch.setitem(ndiff.OPS, "elu", (fw, bad_bw))
    rc = cli.main(["gradcheck", "--instances", "2"])
    report = json.loads(capsys.readouterr().out)
    assert rc == 1
    assert not report["suites"]["ndiff"]["pass"]
