"""
cli.py
Command line interface: ``trajaug <subcommand> --config <path> --out <dir>``.
"""

import os
import sys
import json
import logging
import argparse
from dataclasses import replace

from . import agent, datasets, environments, experiment, generate, worldtrain

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("collect", "train-world", "generate", "train-policy", "evaluate", "experiment", "compare")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajaug",
        description="Offline trajectory augmentation with world-model ensembles and uncertainty-corrected rewards.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="Increase logging output (-v info, -vv debug)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_out=True, with_mode=True):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument(
            "--config",
            type=str,
            default=experiment.default_config_path(),
            help="Experiment configuration file (JSON or YAML)",
        )
        sub.add_argument("--out", type=str, required=needs_out, help="Output directory")
        sub.add_argument("--seed", type=int, action="append", help="Seed; repeat for several seeds")
        if with_mode:
            sub.add_argument("--mode", type=str, choices=experiment.MODES, help="Ablation mode")
        return sub

    add("collect", "Collect the offline dataset described by the configuration")

    sub = add("train-world", "Train the state and reward ensembles")
    sub.add_argument("--data", type=str, required=True, help="Dataset directory")

    sub = add("generate", "Generate and correct augmentation trajectories")
    sub.add_argument("--data", type=str, required=True, help="Dataset directory")
    sub.add_argument("--bundle", type=str, required=True, help="Ensemble bundle directory")
    sub.add_argument("--strategy", type=str, choices=generate.STRATEGIES, help="Segment selection strategy")

    sub = add("train-policy", "Train the offline agent on original plus generated data")
    sub.add_argument("--data", type=str, required=True, help="Original dataset directory")
    sub.add_argument("--generated", type=str, help="Generated dataset directory")

    sub = add("evaluate", "Evaluate a trained policy", needs_out=False)
    sub.add_argument("--policy", type=str, required=True, help="Policy directory")
    sub.add_argument("--metrics", type=str, help="Metrics CSV to append to (default <out>/metrics.csv)")

    sub = add("experiment", "Run the full pipeline for every seed")
    sub.add_argument("--strategy", type=str, choices=generate.STRATEGIES, help="Segment selection strategy")

    sub = add("compare", "Run and tabulate several modes or strategies on one dataset", with_mode=False)
    sub.add_argument("--mode", type=str, action="append", choices=experiment.MODES, help="Mode to compare; repeatable")
    sub.add_argument(
        "--strategy", type=str, action="append", choices=generate.STRATEGIES, help="Strategy to compare; repeatable"
    )
    return parser


def _load(args):
    cfg = experiment.load_config(args.config)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    mode = getattr(args, "mode", None)
    if isinstance(mode, str):
        cfg = replace(cfg, mode=mode)
    strategy = getattr(args, "strategy", None)
    if isinstance(strategy, str):
        cfg = replace(cfg, generation=replace(cfg.generation, strategy=strategy))
    return cfg


def _first_seed(cfg):
    return cfg.seeds[0]


def collect(args):
    cfg = _load(args)
    env = environments.get_env(cfg.env_id)
    data = datasets.collect_dataset(env, cfg.dataset.policy_id, cfg.dataset.n_traj, cfg.dataset.seed)
    datasets.write_dataset(data, args.out)
    print(f"Wrote {len(data)} trajectories ({data.n_transitions} transitions) to {args.out}")


def train_world(args):
    cfg = _load(args).resolved()
    data = datasets.read_dataset(args.data)
    streams = experiment.seed_streams(_first_seed(cfg))
    bundle = worldtrain.train_world_ensemble(data, cfg.world, seed=streams["world"])
    worldtrain.save_bundle(bundle, args.out)
    print(f"Wrote {bundle.K} state and {bundle.Q} reward snapshots to {args.out}")


def generate_data(args):
    cfg = _load(args).resolved()
    if cfg.mode == "original":
        raise ValueError("Mode original does not generate trajectories.")
    data = datasets.read_dataset(args.data)
    bundle = worldtrain.load_bundle(args.bundle)
    if cfg.mode == "single" and (bundle.K > 1 or bundle.Q > 1):
        logger.info("Mode single: using the last of %d state and %d reward snapshots", bundle.K, bundle.Q)
        bundle = bundle.single()
    streams = experiment.seed_streams(_first_seed(cfg))
    gen_cfg = replace(cfg.generation, seed=streams["generation"])
    generated = generate.generate_augmentation(data, bundle, gen_cfg, cfg.evaluator)
    if len(generated) == 0:
        print("No trajectories generated")
        return
    datasets.write_dataset(generated, args.out)
    print(f"Wrote {generated.n_transitions} generated transitions to {args.out}")


def train_policy(args):
    cfg = _load(args).resolved()
    data = datasets.read_dataset(args.data)
    if cfg.mode == "original" and args.generated:
        raise ValueError("Mode original trains on the original dataset only.")
    generated = datasets.read_dataset(args.generated) if args.generated else None
    streams = experiment.seed_streams(_first_seed(cfg))
    policy = agent.train_policy(datasets.mix_datasets(data, generated), replace(cfg.agent, seed=streams["agent"]))
    agent.save_policy(policy, args.out)
    print(f"Wrote policy to {args.out}")


def evaluate(args):
    cfg = _load(args)
    env = environments.get_env(cfg.env_id)
    policy = agent.load_policy(args.policy)
    streams = experiment.seed_streams(_first_seed(cfg))
    mean_return = agent.evaluate_policy(env, policy, cfg.eval_episodes, streams["eval"])
    score = agent.normalized_score(mean_return, env)
    result = {"mean_return": mean_return, "normalized_score": score}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "evaluation.json"), "w") as file:
            file.write(text + "\n")
    metrics = args.metrics or (os.path.join(args.out, "metrics.csv") if args.out else None)
    if metrics:
        K, Q = experiment.ensemble_sizes(cfg)
        experiment.append_metrics([experiment.metrics_row(cfg, _first_seed(cfg), K, Q, mean_return, score)], metrics)
    print(text)


def run(args):
    cfg = _load(args)
    report = experiment.run_experiment(cfg, args.out)
    summary = report.summary()
    print(
        f"{summary['mode']}: normalized score {summary['mean_score']:.2f} +- {summary['std_score']:.2f} "
        f"over {summary['n_seeds']} seeds ({summary['n_generated']} generated transitions)"
    )


def compare(args):
    cfg = _load(args)
    if args.strategy:
        table = experiment.compare_strategies(cfg, args.strategy, args.out)
    else:
        modes = args.mode or list(experiment.MODES)
        table = experiment.compare_modes([replace(cfg, mode=m) for m in modes], args.out)
    print(table.to_string(index=False))


COMMANDS = {
    "collect": collect,
    "train-world": train_world,
    "generate": generate_data,
    "train-policy": train_policy,
    "evaluate": evaluate,
    "experiment": run,
    "compare": compare,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except experiment.StageError as e:
        logger.error("%s", e)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
