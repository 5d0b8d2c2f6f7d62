"""
experiment.py
Experiment configuration, ablation modes and the end-to-end pipeline
collect -> train ensemble -> generate -> correct -> mix -> train policy -> evaluate.
"""

import os
import json
import time
import logging
import contextlib
from dataclasses import dataclass, asdict, field, replace

import numpy as np
import pandas as pd
import yaml

from . import agent, datasets, environments, generate, utils, worldtrain
from .agent import AgentConfig
from .evaluator import EvaluatorConfig

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
MODES = ("original", "single", "no_correct", "otto")
METRIC_COLUMNS = [
    "run_id",
    "mode",
    "strategy",
    "seed",
    "delta",
    "epsilon",
    "h",
    "omega",
    "K",
    "Q",
    "mean_return",
    "normalized_score",
    "wall_seconds",
]
_WORLD_STREAM = 1
_GENERATION_STREAM = 2
_EVAL_STREAM = 3
_AGENT_STREAM = 4


class StageError(RuntimeError):
    """
    A pipeline stage failed. ``stage`` and ``seed`` name where; the original exception is chained.
    """

    def __init__(self, stage, seed, message):
        super().__init__(f"Stage {stage} failed for seed {seed}: {message}")
        self.stage = stage
        self.seed = seed


@dataclass(frozen=True)
class DatasetConfig:
    policy_id: str = "medium"
    n_traj: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.policy_id not in datasets.POLICY_IDS:
            raise ValueError(f"Unknown policy {self.policy_id}. Policy must be any of: {', '.join(datasets.POLICY_IDS)}.")
        if self.n_traj < 1:
            raise ValueError(f"At least one trajectory must be collected, got {self.n_traj}.")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Complete description of one experiment. Serialized with every default materialized.
    """

    run_id: str = "linereach-medium"
    env_id: str = "LineReach"
    mode: str = "otto"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    world: worldtrain.WorldConfig = field(default_factory=worldtrain.WorldConfig)
    generation: generate.GenerationConfig = field(default_factory=generate.GenerationConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    eval_episodes: int = 10
    seeds: tuple = (0, 1, 2, 3, 4)
    record_wall_time: bool = False
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ValueError(f"Unsupported config version {self.config_version}, expected {CONFIG_VERSION}.")
        if self.mode not in MODES:
            raise ValueError(f"Unknown mode {self.mode}. Mode must be any of: {', '.join(MODES)}.")
        if self.eval_episodes < 1:
            raise ValueError(f"At least one evaluation episode is needed, got {self.eval_episodes}.")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise ValueError(f"Seeds must be a non-empty set of distinct integers, got {self.seeds}.")
        object.__setattr__(self, "seeds", seeds)

    def to_dict(self):
        return {
            "config_version": self.config_version,
            "run_id": self.run_id,
            "env_id": self.env_id,
            "mode": self.mode,
            "dataset": self.dataset.to_dict(),
            "world": self.world.to_dict(),
            "generation": self.generation.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "agent": self.agent.to_dict(),
            "eval_episodes": self.eval_episodes,
            "seeds": list(self.seeds),
            "record_wall_time": self.record_wall_time,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sections = {
            "dataset": DatasetConfig,
            "world": worldtrain.WorldConfig,
            "generation": generate.GenerationConfig,
            "evaluator": EvaluatorConfig,
            "agent": AgentConfig,
        }
        for key, section in sections.items():
            if key in d:
                d[key] = section.from_dict(d[key])
        return cls(**d)

    def resolved(self):
        """
        Effective configuration for the mode: ``single`` trains one snapshot per head over the same
        number of optimizer steps and disables correction, ``no_correct`` disables correction.
        """
        cfg = self
        if self.mode in ("single", "no_correct"):
            cfg = replace(cfg, evaluator=replace(cfg.evaluator, enabled=False))
        if self.mode == "single":
            world = cfg.world
            state_schedule = world.schedule
            reward_schedule = world.get_reward_schedule()
            cfg = replace(
                cfg,
                world=replace(
                    world,
                    schedule=_single_cycle(state_schedule),
                    reward_schedule=_single_cycle(reward_schedule) if world.reward_schedule is not None else None,
                ),
            )
        return cfg


def _single_cycle(schedule):
    return replace(schedule, cycle_steps=schedule.cycle_steps * schedule.n_cycles, n_cycles=1)


def load_config(path):
    """
    Reads an experiment configuration from a JSON or YAML file.

    :param path: file path
    :return: :py:class:`ExperimentConfig`
    """
    with open(path) as file:
        return ExperimentConfig.from_dict(yaml.safe_load(file))


def save_config(cfg, path):
    with open(path, "w") as file:
        json.dump(cfg.to_dict(), file, indent=2, sort_keys=True)
        file.write("\n")


def default_config_path(name="linereach_medium"):
    return os.path.join(os.path.dirname(__file__), "sample_data", "experiments", f"{name}.json")


def seed_streams(seed):
    """
    Per-stage seeds derived from one experiment seed.
    """
    return {
        "world": utils.derive_seed(seed, _WORLD_STREAM),
        "generation": utils.derive_seed(seed, _GENERATION_STREAM),
        "eval": utils.derive_seed(seed, _EVAL_STREAM),
        "agent": utils.derive_seed(seed, _AGENT_STREAM),
    }


class ExperimentReport:
    """
    Per-seed metrics of one experiment plus summary statistics.
    """

    def __init__(self, config, metrics, n_generated):
        """
        :param config: :py:class:`ExperimentConfig`
        :param metrics: :py:class:`pandas.DataFrame` with the metric columns, one row per seed
        :param n_generated: :py:class:`list` of generated transition counts per seed
        :return: None
        """
        self.config = config
        self.metrics = metrics
        self.n_generated = list(n_generated)

    def __repr__(self):
        return f"<ExperimentReport {self.config.run_id} {self.config.mode}>"

    def summary(self):
        """
        Mean and population std over seeds.

        :return: :py:class:`dict`
        """
        scores = self.metrics["normalized_score"].to_numpy(dtype=np.float64)
        returns = self.metrics["mean_return"].to_numpy(dtype=np.float64)
        return {
            "run_id": self.config.run_id,
            "mode": self.config.mode,
            "strategy": self.config.generation.strategy,
            "n_seeds": len(scores),
            "mean_return": float(returns.mean()),
            "mean_score": float(scores.mean()),
            "std_score": float(scores.std()),
            "n_generated": int(sum(self.n_generated)),
        }


def ensemble_sizes(cfg):
    """
    Number of state and reward snapshots (K, Q) a configuration trains; (0, 0) when nothing is generated.

    :param cfg: :py:class:`ExperimentConfig`
    :return: :py:class:`tuple` (K, Q)
    """
    if cfg.mode == "original":
        return 0, 0
    world = cfg.resolved().world
    return world.schedule.n_cycles, world.get_reward_schedule().n_cycles


def metrics_row(cfg, seed, K, Q, mean_return, score, wall_seconds=np.nan):
    """
    One metrics record with the :py:data:`METRIC_COLUMNS` keys.
    """
    generating = cfg.mode != "original"
    return {
        "run_id": cfg.run_id,
        "mode": cfg.mode,
        "strategy": cfg.generation.strategy if generating else "none",
        "seed": seed,
        "delta": cfg.generation.ratio if generating else 0.0,
        "epsilon": cfg.generation.noise,
        "h": cfg.generation.horizon,
        "omega": cfg.evaluator.temperature,
        "K": K,
        "Q": Q,
        "mean_return": mean_return,
        "normalized_score": score,
        "wall_seconds": wall_seconds,
    }


def append_metrics(rows, path):
    """
    Appends metric rows to a CSV, writing the header when the file is new.

    :param rows: :py:class:`list` of :py:func:`metrics_row` records
    :param path: CSV file
    :return: :py:class:`pandas.DataFrame` with the appended rows
    """
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    exists = os.path.exists(path)
    if exists:
        with open(path) as file:
            header = file.readline().strip().split(",")
        if header != METRIC_COLUMNS:
            raise ValueError(f"Metrics file {path} has columns {header}, expected {METRIC_COLUMNS}.")
    frame.to_csv(path, mode="a", header=not exists, index=False)
    return frame


@contextlib.contextmanager
def _stage(name, seed, run_dir, timings):
    start = time.perf_counter()
    try:
        yield
    except Exception as e:
        failure = {"stage": name, "seed": seed, "error": type(e).__name__, "message": str(e)}
        with open(os.path.join(run_dir, "failure.json"), "w") as file:
            json.dump(failure, file, indent=2, sort_keys=True)
            file.write("\n")
        logger.error("Stage %s failed for seed %s: %s", name, seed, e)
        raise StageError(name, seed, str(e)) from e
    finally:
        timings.append({"seed": seed, "stage": name, "seconds": time.perf_counter() - start})


def run_experiment(cfg, out):
    """
    Runs the pipeline once per seed and writes every artifact under ``out``: ``config.json``, the
    collected ``dataset/``, per seed ``seed_<s>/`` with ``bundle/``, ``generated/`` and ``policy/``,
    and ``metrics.csv`` and ``timings.csv``.

    :param cfg: :py:class:`ExperimentConfig`
    :param out: run directory
    :return: :py:class:`ExperimentReport`
    """
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.json"))
    effective = cfg.resolved()
    timings = []
    rows = []
    n_generated = []
    failure_file = os.path.join(out, "failure.json")
    if os.path.exists(failure_file):
        os.remove(failure_file)

    with _stage("collect", None, out, timings):
        env = environments.get_env(cfg.env_id)
        data = datasets.collect_dataset(env, cfg.dataset.policy_id, cfg.dataset.n_traj, cfg.dataset.seed)
        datasets.write_dataset(data, os.path.join(out, "dataset"))
        env.get_reference_returns()

    for seed in cfg.seeds:
        seed_dir = os.path.join(out, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        streams = seed_streams(seed)
        started = time.perf_counter()
        K = Q = 0
        generated = None
        if cfg.mode != "original":
            with _stage("train-world", seed, out, timings):
                bundle = worldtrain.train_world_ensemble(data, effective.world, seed=streams["world"])
                worldtrain.save_bundle(bundle, os.path.join(seed_dir, "bundle"))
                K, Q = bundle.K, bundle.Q
            with _stage("generate", seed, out, timings):
                gen_cfg = replace(effective.generation, seed=streams["generation"])
                generated = generate.generate_augmentation(data, bundle, gen_cfg, effective.evaluator)
                if len(generated):
                    datasets.write_dataset(generated, os.path.join(seed_dir, "generated"))
        n_generated.append(0 if generated is None else generated.n_transitions)
        with _stage("train-policy", seed, out, timings):
            mixed = datasets.mix_datasets(data, generated)
            policy = agent.train_policy(mixed, replace(effective.agent, seed=streams["agent"]))
            agent.save_policy(policy, os.path.join(seed_dir, "policy"))
        with _stage("evaluate", seed, out, timings):
            mean_return = agent.evaluate_policy(env, policy, cfg.eval_episodes, streams["eval"])
            score = agent.normalized_score(mean_return, env)
        wall = time.perf_counter() - started if cfg.record_wall_time else np.nan
        logger.info("%s seed %d: return %.4f, normalized score %.2f", cfg.mode, seed, mean_return, score)
        rows.append(metrics_row(cfg, seed, K, Q, mean_return, score, wall))

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    metrics.to_csv(os.path.join(out, "metrics.csv"), index=False)
    pd.DataFrame(timings, columns=["seed", "stage", "seconds"]).to_csv(os.path.join(out, "timings.csv"), index=False)
    return ExperimentReport(cfg, metrics, n_generated)


def comparison_table(reports, key="mode", order=None, baseline=None, labels=None):
    """
    One row per report with mean and std normalized score and the difference of its mean to every other
    row (``delta_vs_<name>``).

    :param reports: :py:class:`list` of :py:class:`ExperimentReport`
    :param key: ``mode``, ``strategy`` or the column name for ``labels``
    :param labels: row names, one per report, used instead of the summary's ``key`` entry
    :param order: row order; reports not listed keep their input order after the listed ones
    :param baseline: row name used for ``delta``; the first row if omitted
    :return: :py:class:`pandas.DataFrame`
    """
    summaries = [r.summary() for r in reports]
    if labels is not None:
        if len(labels) != len(summaries):
            raise ValueError(f"Got {len(labels)} labels for {len(summaries)} reports.")
        for summary, label in zip(summaries, labels):
            summary[key] = label
    names = [s[key] for s in summaries]
    if len(set(names)) != len(names):
        raise ValueError(f"Duplicate {key} values in comparison: {names}.")
    if order is not None:
        rank = {name: i for i, name in enumerate(order)}
        summaries.sort(key=lambda s: rank.get(s[key], len(rank)))
    df = pd.DataFrame(summaries)[[key, "n_seeds", "mean_return", "mean_score", "std_score", "n_generated"]]
    baseline = df[key].iloc[0] if baseline is None else baseline
    base_mean = float(df.loc[df[key] == baseline, "mean_score"].iloc[0])
    df["delta"] = df["mean_score"] - base_mean
    for name, mean in zip(df[key], df["mean_score"]):
        df[f"delta_vs_{name}"] = df["mean_score"] - mean
    return df.reset_index(drop=True)


def _check_comparable(cfgs):
    if len(cfgs) < 2:
        raise ValueError(f"A comparison needs at least 2 configurations, got {len(cfgs)}.")
    first = cfgs[0]
    for cfg in cfgs[1:]:
        if cfg.env_id != first.env_id or cfg.dataset != first.dataset:
            raise ValueError(
                f"Configurations must share environment and dataset: {first.env_id}/{first.dataset} vs "
                f"{cfg.env_id}/{cfg.dataset}."
            )


def compare_modes(cfgs, out):
    """
    Runs every configuration under ``out/<mode>`` and tabulates them in the order original, single,
    no_correct, otto. ``delta`` is each mode's mean minus the original mean.

    :param cfgs: :py:class:`list` of :py:class:`ExperimentConfig` with distinct modes
    :param out: directory for the runs and ``comparison.csv``
    :return: :py:class:`pandas.DataFrame`
    """
    cfgs = list(cfgs)
    _check_comparable(cfgs)
    reports = [run_experiment(cfg, os.path.join(out, cfg.mode)) for cfg in cfgs]
    baseline = "original" if any(cfg.mode == "original" for cfg in cfgs) else None
    table = comparison_table(reports, key="mode", order=MODES, baseline=baseline)
    table.to_csv(os.path.join(out, "comparison.csv"), index=False)
    return table


def compare_strategies(cfg, strategies, out):
    """
    Runs ``cfg`` once per selection strategy under ``out/<strategy>``.

    :param cfg: :py:class:`ExperimentConfig`
    :param strategies: :py:class:`list` of strategy names
    :param out: directory for the runs and ``comparison.csv``
    :return: :py:class:`pandas.DataFrame`
    """
    strategies = list(strategies)
    if len(strategies) < 2:
        raise ValueError(f"A comparison needs at least 2 strategies, got {len(strategies)}.")
    if cfg.mode == "original":
        raise ValueError("Strategies cannot be compared without generation.")
    reports = [
        run_experiment(replace(cfg, generation=replace(cfg.generation, strategy=s)), os.path.join(out, s))
        for s in strategies
    ]
    table = comparison_table(reports, key="strategy", order=generate.STRATEGIES)
    table.to_csv(os.path.join(out, "comparison.csv"), index=False)
    return table


SWEEP_PARAMETERS = ("ratio", "noise", "horizon", "temperature", "ensemble_size")


def with_parameter(cfg, parameter, value):
    """
    Copy of ``cfg`` with one hyperparameter replaced. ``ratio``, ``noise`` and ``horizon`` are generation
    settings, ``temperature`` is the correction temperature and ``ensemble_size`` sets K = Q through the
    number of schedule cycles (cycle length unchanged).

    :param cfg: :py:class:`ExperimentConfig`
    :param parameter: any of :py:data:`SWEEP_PARAMETERS`
    :param value: new value
    :return: :py:class:`ExperimentConfig`
    """
    if parameter in ("ratio", "noise", "horizon"):
        return replace(cfg, generation=replace(cfg.generation, **{parameter: value}))
    if parameter == "temperature":
        return replace(cfg, evaluator=replace(cfg.evaluator, temperature=value))
    if parameter == "ensemble_size":
        world = cfg.world
        reward_schedule = world.reward_schedule
        if reward_schedule is not None:
            reward_schedule = replace(reward_schedule, n_cycles=int(value))
        world = replace(world, schedule=replace(world.schedule, n_cycles=int(value)), reward_schedule=reward_schedule)
        return replace(cfg, world=world)
    raise ValueError(f"Unknown sweep parameter {parameter}. Parameter must be any of: {', '.join(SWEEP_PARAMETERS)}.")


def sweep_parameter(cfg, parameter, values, out):
    """
    Runs ``cfg`` once per value of one hyperparameter under ``out/<parameter>_<value>`` and tabulates the
    runs in the given order; ``delta`` is relative to the first value.

    :param cfg: :py:class:`ExperimentConfig`, any mode that generates
    :param parameter: any of :py:data:`SWEEP_PARAMETERS`
    :param values: at least 2 distinct values
    :param out: directory for the runs and ``sweep_<parameter>.csv``
    :return: :py:class:`pandas.DataFrame` with one row per value
    """
    values = list(values)
    if len(values) < 2 or len(set(values)) != len(values):
        raise ValueError(f"A sweep needs at least 2 distinct values, got {values}.")
    if cfg.mode == "original":
        raise ValueError("Generation parameters cannot be swept without generation.")
    if parameter == "ensemble_size" and cfg.mode == "single":
        raise ValueError("Mode single fixes the ensemble size to 1.")
    cfgs = [with_parameter(cfg, parameter, v) for v in values]
    reports = [run_experiment(c, os.path.join(out, f"{parameter}_{v}")) for c, v in zip(cfgs, values)]
    table = comparison_table(reports, key=parameter, labels=values)
    table.to_csv(os.path.join(out, f"sweep_{parameter}.csv"), index=False)
    return table
