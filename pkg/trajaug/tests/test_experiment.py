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
import yaml

from trajaug import agent, experiment, generate, utils, worldtrain


TINY = experiment.ExperimentConfig(
    run_id="tiny",
    dataset=experiment.DatasetConfig(n_traj=6, seed=0),
    world=worldtrain.WorldConfig(
        embed_dim=8, n_layer=1, n_head=2, context_len=4, batch_size=16, schedule=worldtrain.SCHEDULE_PRESETS["smoke"]
    ),
    generation=generate.GenerationConfig(horizon=10, ratio=0.1),
    agent=agent.AgentConfig(hidden=(16, 16), steps=50, batch_size=32, history_interval=25),
    eval_episodes=2,
    seeds=(0, 1),
)


@pytest.fixture(scope="module")
def otto_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("otto"))
    return out, experiment.run_experiment(TINY, out)


def _report(mode, scores, strategy="softmax"):
    cfg = replace(TINY, mode=mode, generation=replace(TINY.generation, strategy=strategy))
    metrics = pd.DataFrame(
        {"normalized_score": scores, "mean_return": [-10.0] * len(scores)}, columns=["normalized_score", "mean_return"]
    )
    return experiment.ExperimentReport(cfg, metrics, [0] * len(scores))


def test_config_round_trip(tmp_path):
    assert experiment.ExperimentConfig.from_dict(TINY.to_dict()) == TINY
    path = str(tmp_path / "config.json")
    experiment.save_config(TINY, path)
    assert experiment.load_config(path) == TINY

    yaml_path = str(tmp_path / "config.yml")
    with open(yaml_path, "w") as file:
        yaml.safe_dump(TINY.to_dict(), file)
    assert experiment.load_config(yaml_path) == TINY


def test_default_configs():
    cfg = experiment.load_config(experiment.default_config_path())
    assert cfg.mode == "otto"
    assert cfg.env_id == "LineReach"
    assert cfg.generation.horizon == 10
    assert cfg.world.schedule == worldtrain.LRSchedule(base_lr=1e-3, warmup_steps=2000, cycle_steps=8000, n_cycles=4)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    sparse = experiment.load_config(experiment.default_config_path("sparsereach_medium"))
    assert sparse.env_id == "SparseReach"

    # every default is materialized
    with open(experiment.default_config_path()) as file:
        assert json.load(file) == cfg.to_dict()


def test_config_invalid():
    with pytest.raises(ValueError, match="Unknown mode"):
        replace(TINY, mode="ensemble")
    with pytest.raises(ValueError, match="distinct"):
        replace(TINY, seeds=(1, 1))
    with pytest.raises(ValueError, match="config version"):
        replace(TINY, config_version=2)
    with pytest.raises(ValueError, match="Unknown policy"):
        experiment.DatasetConfig(policy_id="optimal")


def test_resolved_modes():
    otto = TINY.resolved()
    assert otto == TINY
    assert replace(TINY, mode="original").resolved().evaluator.enabled
    assert not replace(TINY, mode="no_correct").resolved().evaluator.enabled

    single = replace(TINY, mode="single").resolved()
    assert not single.evaluator.enabled
    assert single.world.schedule.n_cycles == 1
    assert single.world.schedule.total_steps == TINY.world.schedule.total_steps
    assert single.world.reward_schedule is None


def test_seed_streams():
    streams = experiment.seed_streams(0)
    assert set(streams) == {"world", "generation", "eval", "agent"}
    assert len(set(streams.values())) == 4
    assert streams["world"] == utils.derive_seed(0, 1)
    assert streams != experiment.seed_streams(1)


def test_run_experiment(otto_run):
    out, report = otto_run
    for name in ("config.json", "metrics.csv", "timings.csv", "dataset/meta.json"):
        assert os.path.exists(os.path.join(out, name))
    for seed in (0, 1):
        for sub in ("bundle/bundle.json", "generated/meta.json", "policy/policy.json"):
            assert os.path.exists(os.path.join(out, f"seed_{seed}", sub))
    assert not os.path.exists(os.path.join(out, "failure.json"))

    metrics = pd.read_csv(os.path.join(out, "metrics.csv"))
    assert list(metrics.columns) == experiment.METRIC_COLUMNS
    assert list(metrics["seed"]) == [0, 1]
    assert (metrics["K"] == 4).all() and (metrics["Q"] == 4).all()
    assert (metrics["strategy"] == "softmax").all()
    assert metrics["delta"].iloc[0] == pytest.approx(0.1)
    assert metrics["omega"].iloc[0] == pytest.approx(0.7)
    assert metrics["wall_seconds"].isna().all()
    assert report.n_generated == [30, 30]

    timings = pd.read_csv(os.path.join(out, "timings.csv"))
    assert set(timings["stage"]) == {"collect", "train-world", "generate", "train-policy", "evaluate"}

    summary = report.summary()
    assert summary["n_seeds"] == 2
    assert summary["n_generated"] == 60
    assert summary["mean_score"] == pytest.approx(metrics["normalized_score"].mean())


def test_run_original_is_reproducible(tmp_path):
    cfg = replace(TINY, mode="original", seeds=(0,), record_wall_time=False)
    first = experiment.run_experiment(cfg, str(tmp_path / "a"))
    experiment.run_experiment(cfg, str(tmp_path / "b"))
    row = first.metrics.iloc[0]
    assert row["strategy"] == "none"
    assert row["delta"] == 0.0
    assert row["K"] == 0 and row["Q"] == 0
    assert first.n_generated == [0]
    assert not os.path.exists(str(tmp_path / "a" / "seed_0" / "generated"))
    with open(tmp_path / "a" / "metrics.csv", "rb") as a, open(tmp_path / "b" / "metrics.csv", "rb") as b:
        assert a.read() == b.read()


def _tree_bytes(root, skip=("timings.csv",)):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            if name in skip:
                continue
            path = os.path.join(folder, name)
            with open(path, "rb") as file:
                files[os.path.relpath(path, root)] = file.read()
    return files


def test_run_otto_is_reproducible(tmp_path):
    cfg = replace(TINY, seeds=(0,))
    experiment.run_experiment(cfg, str(tmp_path / "a"))
    experiment.run_experiment(cfg, str(tmp_path / "b"))
    first, second = _tree_bytes(str(tmp_path / "a")), _tree_bytes(str(tmp_path / "b"))
    for parts in [("bundle", "bundle.json"), ("bundle", "reward_3.bin"), ("generated", "data.bin"), ("policy", "actor.bin")]:
        assert os.path.join("seed_0", *parts) in first
    assert "metrics.csv" in first and os.path.join("dataset", "data.bin") in first
    assert sorted(first) == sorted(second)
    for name in first:
        assert first[name] == second[name], name


def test_run_single_mode(tmp_path):
    report = experiment.run_experiment(replace(TINY, mode="single", seeds=(0,)), str(tmp_path))
    assert report.metrics["K"].iloc[0] == 1
    assert report.metrics["Q"].iloc[0] == 1


def test_wall_time_recorded(tmp_path):
    report = experiment.run_experiment(replace(TINY, mode="original", seeds=(0,), record_wall_time=True), str(tmp_path))
    assert report.metrics["wall_seconds"].iloc[0] > 0


def test_stage_error(tmp_path):
    cfg = replace(TINY, mode="original", seeds=(3,), agent=replace(TINY.agent, lr=1e300))
    with pytest.raises(experiment.StageError) as e:
        experiment.run_experiment(cfg, str(tmp_path))
    assert e.value.stage == "train-policy"
    assert e.value.seed == 3
    with open(tmp_path / "failure.json") as file:
        failure = json.load(file)
    assert failure["stage"] == "train-policy"
    assert failure["seed"] == 3
    assert failure["error"] == "NonFiniteError"


def test_summary_population_std():
    summary = _report("otto", [10.0, 20.0]).summary()
    assert summary["mean_score"] == pytest.approx(15.0)
    assert summary["std_score"] == pytest.approx(5.0)


def test_comparison_table():
    reports = [_report("otto", [30.0]), _report("original", [10.0]), _report("single", [15.0])]
    table = experiment.comparison_table(reports, order=experiment.MODES, baseline="original")
    assert list(table["mode"]) == ["original", "single", "otto"]
    np.testing.assert_allclose(table["delta"], [0.0, 5.0, 20.0])
    np.testing.assert_allclose(table["delta_vs_single"], [-5.0, 0.0, 15.0])
    with pytest.raises(ValueError, match="Duplicate"):
        experiment.comparison_table([_report("otto", [1.0]), _report("otto", [2.0])])


def test_compare_modes(tmp_path):
    cfgs = [replace(TINY, mode=m, seeds=(0,)) for m in ("otto", "original")]
    table = experiment.compare_modes(cfgs, str(tmp_path))
    assert list(table["mode"]) == ["original", "otto"]
    assert table["delta"].iloc[0] == 0.0
    assert os.path.exists(tmp_path / "comparison.csv")
    assert os.path.exists(tmp_path / "otto" / "metrics.csv")
    assert os.path.exists(tmp_path / "original" / "metrics.csv")


def test_compare_invalid(tmp_path):
    with pytest.raises(ValueError, match="at least 2"):
        experiment.compare_modes([TINY], str(tmp_path))
    other = replace(TINY, mode="original", dataset=replace(TINY.dataset, seed=1))
    with pytest.raises(ValueError, match="share environment and dataset"):
        experiment.compare_modes([TINY, other], str(tmp_path))
    with pytest.raises(ValueError, match="at least 2 strategies"):
        experiment.compare_strategies(TINY, ["softmax"], str(tmp_path))
    with pytest.raises(ValueError, match="without generation"):
        experiment.compare_strategies(replace(TINY, mode="original"), ["softmax", "top_n"], str(tmp_path))


def test_compare_strategies(tmp_path):
    table = experiment.compare_strategies(replace(TINY, seeds=(0,)), ["top_n", "random"], str(tmp_path))
    assert list(table["strategy"]) == ["random", "top_n"]
    assert "delta_vs_top_n" in table.columns


def test_with_parameter():
    assert experiment.with_parameter(TINY, "ratio", 0.2).generation.ratio == 0.2
    assert experiment.with_parameter(TINY, "noise", 0.3).generation.noise == 0.3
    assert experiment.with_parameter(TINY, "temperature", 0.5).evaluator.temperature == 0.5
    sized = experiment.with_parameter(TINY, "ensemble_size", 2)
    assert experiment.ensemble_sizes(sized) == (2, 2)
    assert sized.world.schedule.cycle_steps == TINY.world.schedule.cycle_steps
    with pytest.raises(ValueError, match="Unknown sweep parameter"):
        experiment.with_parameter(TINY, "lr", 0.1)


def test_sweep_ratio(tmp_path):
    table = experiment.sweep_parameter(replace(TINY, seeds=(0,)), "ratio", [0.05, 0.1], str(tmp_path))
    assert list(table["ratio"]) == [0.05, 0.1]
    assert list(table["n_generated"]) == [10, 30]
    assert table["delta"].iloc[0] == 0.0
    assert "delta_vs_0.05" in table.columns
    assert os.path.exists(tmp_path / "sweep_ratio.csv")
    metrics = pd.read_csv(tmp_path / "ratio_0.1" / "metrics.csv")
    assert metrics["delta"].iloc[0] == pytest.approx(0.1)


def test_sweep_ensemble_size(tmp_path):
    experiment.sweep_parameter(replace(TINY, seeds=(0,)), "ensemble_size", [1, 2], str(tmp_path))
    for size in (1, 2):
        metrics = pd.read_csv(tmp_path / f"ensemble_size_{size}" / "metrics.csv")
        assert metrics["K"].iloc[0] == size and metrics["Q"].iloc[0] == size


def test_sweep_invalid(tmp_path):
    with pytest.raises(ValueError, match="at least 2 distinct"):
        experiment.sweep_parameter(TINY, "noise", [0.1, 0.1], str(tmp_path))
    with pytest.raises(ValueError, match="without generation"):
        experiment.sweep_parameter(replace(TINY, mode="original"), "noise", [0.1, 0.2], str(tmp_path))
    with pytest.raises(ValueError, match="fixes the ensemble size"):
        experiment.sweep_parameter(replace(TINY, mode="single"), "ensemble_size", [1, 2], str(tmp_path))


def test_metrics_helpers(tmp_path):
    assert experiment.ensemble_sizes(TINY) == (4, 4)
    assert experiment.ensemble_sizes(replace(TINY, mode="single")) == (1, 1)
    assert experiment.ensemble_sizes(replace(TINY, mode="original")) == (0, 0)

    path = str(tmp_path / "metrics.csv")
    row = experiment.metrics_row(replace(TINY, mode="original"), 2, 0, 0, -12.5, 40.0)
    experiment.append_metrics([row], path)
    experiment.append_metrics([row], path)
    metrics = pd.read_csv(path)
    assert list(metrics.columns) == experiment.METRIC_COLUMNS
    assert len(metrics) == 2
    assert metrics["strategy"].iloc[0] == "none"
    assert metrics["wall_seconds"].isna().all()

    other = str(tmp_path / "other.csv")
    pd.DataFrame({"a": [1]}).to_csv(other, index=False)
    with pytest.raises(ValueError, match="expected"):
        experiment.append_metrics([row], other)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["linereach_medium", "sparsereach_medium"])
def test_augmentation_improves_scores(tmp_path, name):
    cfg = experiment.load_config(experiment.default_config_path(name))
    modes = ("original", "no_correct", "otto")
    table = experiment.compare_modes([replace(cfg, mode=m) for m in modes], str(tmp_path)).set_index("mode")
    scores = table["mean_score"]
    assert scores["otto"] >= scores["original"]
    if name == "linereach_medium":
        assert scores["otto"] >= scores["no_correct"] - 2.0
        assert scores["no_correct"] >= scores["original"] - 2.0
        assert scores["otto"] - scores["original"] >= 3.0
