import json
import os

import pytest
import yaml

from ofdmarl.cli import build_parser, main

SMOKE_CFG = {
    "cell": {
        "k": 4, "n_prb": 4, "buffer_slots": 4,
    },
    "qos": [
        {"qi": 1, "gbr": 20000.0, "pdb": 10, "packet_size": 400,
         "arrival_period": 4, "penalty_weight": 4.0},
        {"qi": 2, "gbr": 60000.0, "pdb": 15, "packet_size": 1200,
         "arrival_period": 5, "penalty_weight": 3.0},
        {"qi": 3, "gbr": 40000.0, "pdb": 30, "packet_size": 2000,
         "arrival_period": 0, "poisson_mean": 8.0, "penalty_weight": 2.0},
        {"qi": 4, "gbr": 20000.0, "pdb": 50, "packet_size": 2000,
         "arrival_period": 0, "poisson_mean": 12.0, "penalty_weight": 1.0},
    ],
    "train": {
        "batch_size": 8, "replay_capacity": 64, "learn_every": 4,
        "learning_rate": 1e-3, "encoder_hidden": [6, 4],
        "main_hidden": [8, 8], "target_sync": 0,
    },
    "run": {
        "episodes": 4, "steps_per_episode": 60, "eval_every": 2,
        "eval_steps": 40, "n_training_seeds": 2, "n_eval_seeds": 2,
        "n_test_seeds": 4,
    },
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump(SMOKE_CFG))
    return path


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


# -- train --------------------------------------------------------------------


def test_train_writes_manifest_logs_checkpoints(tmp_path, cfg_file):
    out = tmp_path / "run_a"
    code = run_cli("train", "--config", cfg_file, "--seed", "7",
                   "--variant", "rps", "--out", out)
    assert code == 0
    assert (out / "manifest.json").exists()
    assert (out / "training_log.csv").exists()
    assert (out / "eval_log.csv").exists()
    ckpts = sorted((out / "checkpoints").glob("*.ckpt"))
    assert ckpts

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "train"
    assert manifest["master_seed"] == 7
    assert manifest["variant"] == "rps"
    assert manifest["config"]["train"]["shuffle_mode"] == "rps"
    assert manifest["config"]["train"]["age_cap"] is True


def test_train_missing_config_exits_2(tmp_path):
    code = run_cli("train", "--config", tmp_path / "nope.yaml",
                   "--out", tmp_path / "x")
    assert code == 2


def test_train_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cell:\n  k: 6\n")
    code = run_cli("train", "--config", bad, "--out", tmp_path / "x")
    assert code == 2


def test_train_twice_is_byte_identical(tmp_path, cfg_file):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("train", "--config", cfg_file, "--seed", "3",
                   "--out", out_a) == 0
    assert run_cli("train", "--config", cfg_file, "--seed", "3",
                   "--out", out_b) == 0
    assert (out_a / "training_log.csv").read_bytes() == \
        (out_b / "training_log.csv").read_bytes()
    assert (out_a / "eval_log.csv").read_bytes() == \
        (out_b / "eval_log.csv").read_bytes()


def test_train_numeric_fault_exits_3(tmp_path, cfg_file):
    code = run_cli("train", "--config", cfg_file, "--out", tmp_path / "x",
                   "--debug-nan-at", "100")
    assert code == 3


def test_train_does_not_write_outside_out(tmp_path, cfg_file, monkeypatch):
    workdir = tmp_path / "cwd"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    out = tmp_path / "only_here"
    assert run_cli("train", "--config", cfg_file, "--out", out) == 0
    assert list(workdir.iterdir()) == []


# -- eval / bench ---------------------------------------------------------------


def trained_checkpoint(tmp_path, cfg_file):
    out = tmp_path / "trained"
    assert run_cli("train", "--config", cfg_file, "--seed", "5",
                   "--out", out) == 0
    return sorted((out / "checkpoints").glob("*.ckpt"))[-1]


def test_eval_baseline_and_checkpoint(tmp_path, cfg_file):
    ckpt = trained_checkpoint(tmp_path, cfg_file)
    out = tmp_path / "eval_rrit"
    assert run_cli("eval", "--config", cfg_file, "--agent", "rrit",
                   "--steps", "80", "--eval-seeds", "2", "--out", out) == 0
    assert (out / "eval_report.csv").exists()

    out2 = tmp_path / "eval_dqn"
    assert run_cli("eval", "--config", cfg_file, "--agent", f"dqn:{ckpt}",
                   "--steps", "80", "--eval-seeds", "2", "--out", out2) == 0
    assert (out2 / "eval_report.csv").exists()


def test_eval_missing_checkpoint_exits_2(tmp_path, cfg_file):
    code = run_cli("eval", "--config", cfg_file, "--agent", "dqn:/no/file.ckpt",
                   "--steps", "40", "--out", tmp_path / "x")
    assert code == 2


def test_eval_trajectory_dump(tmp_path, cfg_file):
    out = tmp_path / "traj"
    assert run_cli("eval", "--config", cfg_file, "--agent", "pfca",
                   "--steps", "40", "--trajectory", "--out", out) == 0
    lines = (out / "trajectory.csv").read_text().strip().splitlines()
    assert lines[0] == "tti,prb,action,allocated_bits,reward_so_far"
    assert len(lines) == 41


def test_bench_cardinality(tmp_path, cfg_file):
    out = tmp_path / "bench"
    assert run_cli("bench", "--config", cfg_file,
                   "--agents", "rrit,pfca,knapsack",
                   "--steps", "64", "--test-seeds", "4", "--out", out) == 0
    lines = (out / "benchmark.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 * 4 + 3


def test_bench_default_steps_is_65536():
    parser = build_parser()
    args = parser.parse_args(["bench", "--agents", "rrit", "--out", "x"])
    assert args.steps == 65_536
    assert args.test_seeds == 300


def test_bench_unknown_agent_exits_2(tmp_path, cfg_file, capsys):
    code = run_cli("bench", "--config", cfg_file, "--agents", "rrit,warp",
                   "--steps", "16", "--test-seeds", "2",
                   "--out", tmp_path / "x")
    assert code == 2
    err = capsys.readouterr().err
    assert "rrit" in err and "knapsack" in err    # lists the valid names


# -- gradcheck / selftest ---------------------------------------------------------


def test_gradcheck_passes():
    assert run_cli("gradcheck", "--instances", "2") == 0


def test_gradcheck_detects_injected_fault():
    assert run_cli("gradcheck", "--instances", "1", "--inject-fault") == 1


def test_selftest_passes(capsys):
    assert run_cli("selftest") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4


def test_selftest_fails_with_gradient_fault(capsys):
    assert run_cli("selftest", "--inject-gradient-fault") == 1
    assert "FAIL gradient-check" in capsys.readouterr().out


# -- seeding and manifests --------------------------------------------------------


def test_env_var_seed_fallback(tmp_path, cfg_file, monkeypatch):
    out_flag, out_env = tmp_path / "flag", tmp_path / "env"
    assert run_cli("train", "--config", cfg_file, "--seed", "17",
                   "--out", out_flag) == 0
    monkeypatch.setenv("OFDMARL_SEED", "17")
    assert run_cli("train", "--config", cfg_file, "--out", out_env) == 0
    assert (out_flag / "training_log.csv").read_bytes() == \
        (out_env / "training_log.csv").read_bytes()


def test_rerun_reproduces_csvs(tmp_path, cfg_file):
    out = tmp_path / "orig"
    assert run_cli("train", "--config", cfg_file, "--seed", "23",
                   "--variant", "sps", "--out", out) == 0
    replay = tmp_path / "replay"
    assert run_cli("rerun", out / "manifest.json", "--out", replay) == 0
    assert (out / "training_log.csv").read_bytes() == \
        (replay / "training_log.csv").read_bytes()
    assert (out / "eval_log.csv").read_bytes() == \
        (replay / "eval_log.csv").read_bytes()
    assert (out / "manifest.json").read_bytes() == \
        (replay / "manifest.json").read_bytes()


def test_rerun_bench(tmp_path, cfg_file):
    out = tmp_path / "bench1"
    assert run_cli("bench", "--config", cfg_file, "--agents", "rrit,random",
                   "--steps", "32", "--test-seeds", "3", "--out", out) == 0
    replay = tmp_path / "bench2"
    assert run_cli("rerun", out / "manifest.json", "--out", replay) == 0
    assert (out / "benchmark.csv").read_bytes() == \
        (replay / "benchmark.csv").read_bytes()


def test_bands_cli(tmp_path, cfg_file):
    outs = []
    for i, seed in enumerate((1, 2, 3)):
        out = tmp_path / f"r{i}"
        assert run_cli("train", "--config", cfg_file, "--seed", seed,
                       "--out", out) == 0
        outs.append(out / "eval_log.csv")
    bands = tmp_path / "bands.csv"
    assert run_cli("bands", *outs, "--out", bands) == 0
    lines = bands.read_text().strip().splitlines()
    assert lines[0] == "episode,median,inner_lo,inner_hi,outer_lo,outer_hi"
    assert len(lines) == 3          # eval points at episodes 2 and 4
