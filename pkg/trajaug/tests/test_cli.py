"""
Unit and regression test for the trajaug package.
"""

# Import package, test suite, and other packages as needed
import os
import json
from dataclasses import replace

import pytest
import numpy as np
import pandas as pd

from trajaug import agent, cli, datasets, experiment, generate, worldtrain


@pytest.fixture
def tiny_config(tmp_path):
    cfg = experiment.ExperimentConfig(
        run_id="cli",
        dataset=experiment.DatasetConfig(n_traj=4, seed=0),
        world=worldtrain.WorldConfig(
            embed_dim=8, n_layer=1, n_head=2, context_len=4, batch_size=8, schedule=worldtrain.SCHEDULE_PRESETS["smoke"]
        ),
        generation=generate.GenerationConfig(horizon=10, ratio=0.1),
        agent=agent.AgentConfig(hidden=(8,), steps=20, batch_size=16, history_interval=10),
        eval_episodes=2,
        seeds=(0,),
    )
    path = str(tmp_path / "config.json")
    experiment.save_config(cfg, path)
    return path


def test_parser():
    parser = cli.build_parser()
    args = parser.parse_args(["-vv", "experiment", "--out", "runs", "--mode", "single", "--seed", "1", "--seed", "2"])
    assert args.verbose == 2
    assert args.command == "experiment"
    assert args.mode == "single"
    assert args.seed == [1, 2]
    assert args.config == experiment.default_config_path()

    args = parser.parse_args(["compare", "--out", "runs", "--strategy", "top_n", "--strategy", "random"])
    assert args.strategy == ["top_n", "random"]
    assert set(cli.COMMANDS) == set(cli.SUBCOMMANDS)


def test_parser_rejects():
    parser = cli.build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["experiment", "--out", "runs", "--mode", "ensemble"])
    with pytest.raises(SystemExit):
        parser.parse_args(["train-world", "--out", "bundle"])
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_pipeline_commands(tmp_path, tiny_config, capsys):
    data = str(tmp_path / "data")
    bundle = str(tmp_path / "bundle")
    generated = str(tmp_path / "generated")
    policy = str(tmp_path / "policy")
    assert cli.main(["collect", "--config", tiny_config, "--out", data]) == 0
    assert "Wrote 4 trajectories" in capsys.readouterr().out
    assert cli.main(["train-world", "--config", tiny_config, "--data", data, "--out", bundle]) == 0
    assert os.path.exists(os.path.join(bundle, "bundle.json"))
    assert cli.main(
        ["generate", "--config", tiny_config, "--data", data, "--bundle", bundle, "--out", generated, "--strategy", "top_n"]
    ) == 0
    assert "Wrote 20 generated transitions" in capsys.readouterr().out
    assert cli.main(
        ["train-policy", "--config", tiny_config, "--data", data, "--generated", generated, "--out", policy]
    ) == 0
    assert cli.main(["evaluate", "--config", tiny_config, "--policy", policy, "--out", str(tmp_path / "eval")]) == 0
    printed = json.loads(capsys.readouterr().out)
    with open(tmp_path / "eval" / "evaluation.json") as file:
        assert json.load(file) == printed
    assert set(printed) == {"mean_return", "normalized_score"}

    metrics = pd.read_csv(tmp_path / "eval" / "metrics.csv")
    assert list(metrics.columns) == experiment.METRIC_COLUMNS
    assert metrics["normalized_score"].iloc[0] == pytest.approx(printed["normalized_score"])
    assert metrics["K"].iloc[0] == 4 and metrics["Q"].iloc[0] == 4
    assert metrics["wall_seconds"].isna().all()

    shared = str(tmp_path / "metrics.csv")
    for mode in ("otto", "original"):
        args = ["evaluate", "--config", tiny_config, "--policy", policy, "--mode", mode, "--metrics", shared]
        assert cli.main(args) == 0
    metrics = pd.read_csv(shared)
    assert list(metrics["mode"]) == ["otto", "original"]
    assert list(metrics["K"]) == [4, 0]


def test_single_mode_commands(tmp_path, tiny_config, capsys):
    data = str(tmp_path / "data")
    bundle = str(tmp_path / "bundle")
    assert cli.main(["collect", "--config", tiny_config, "--out", data, "--mode", "single"]) == 0
    one = str(tmp_path / "one")
    assert cli.main(["train-world", "--config", tiny_config, "--data", data, "--out", one, "--mode", "single"]) == 0
    assert "Wrote 1 state and 1 reward snapshots" in capsys.readouterr().out
    assert cli.main(["train-world", "--config", tiny_config, "--data", data, "--out", bundle]) == 0

    generated = str(tmp_path / "generated")
    args = ["generate", "--config", tiny_config, "--data", data, "--bundle", bundle, "--out", generated]
    assert cli.main(args + ["--mode", "single"]) == 0

    cfg = replace(experiment.load_config(tiny_config), mode="single").resolved()
    gen_cfg = replace(cfg.generation, seed=experiment.seed_streams(cfg.seeds[0])["generation"])
    loaded = worldtrain.load_bundle(bundle)
    assert loaded.K == 4
    expected = generate.generate_augmentation(datasets.read_dataset(data), loaded.single(), gen_cfg, cfg.evaluator)
    written = datasets.read_dataset(generated)
    assert len(written) == len(expected)
    for a, b in zip(written, expected):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.rewards, b.rewards)

    assert cli.main(args + ["--mode", "original"]) == 2
    assert "does not generate" in capsys.readouterr().err


def test_experiment_command(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["experiment", "--config", tiny_config, "--out", out, "--mode", "original", "--seed", "4"]) == 0
    assert "original: normalized score" in capsys.readouterr().out
    saved = experiment.load_config(os.path.join(out, "config.json"))
    assert saved.mode == "original"
    assert saved.seeds == (4,)


def test_compare_command(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "cmp")
    assert cli.main(["compare", "--config", tiny_config, "--out", out, "--mode", "otto", "--mode", "original"]) == 0
    assert "delta_vs_otto" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out, "comparison.csv"))


def test_main_errors(tmp_path, tiny_config, capsys):
    assert cli.main(["collect", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err

    cfg = experiment.load_config(tiny_config)
    broken = str(tmp_path / "broken.json")
    experiment.save_config(replace(cfg, mode="original", agent=replace(cfg.agent, lr=1e300)), broken)
    assert cli.main(["experiment", "--config", broken, "--out", str(tmp_path / "run")]) == 1
    assert os.path.exists(tmp_path / "run" / "failure.json")
