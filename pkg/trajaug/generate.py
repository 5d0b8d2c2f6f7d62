"""
generate.py
Segment selection and perturbed-action rollouts through the world-model ensembles.
"""

import math
import logging
import warnings
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import softmax

from . import datasets, environments, evaluator, seqcore, utils

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "top_n", "softmax")
_SELECTION_STREAM = 0
_ROLLOUT_STREAM = 1


@dataclass(frozen=True)
class GenerationConfig:
    """
    Everything governing augmentation.

    ``horizon`` is the generated trajectory length h, ``noise`` the half-range of the uniform action
    perturbation, ``ratio`` the target augmentation ratio and ``temperature`` the softmax selection
    temperature. With ``normalize_returns`` the softmax acts on z-scored cumulative rewards.
    """

    strategy: str = "softmax"
    horizon: int = 50
    noise: float = 0.1
    ratio: float = 0.1
    temperature: float = 1.0
    normalize_returns: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown strategy {self.strategy}. Strategy must be any of: {', '.join(STRATEGIES)}.")
        if self.horizon < 2:
            raise ValueError(f"Generation horizon must be at least 2, got {self.horizon}.")
        if self.noise < 0:
            raise ValueError(f"Noise range must be non-negative, got {self.noise}.")
        if not self.ratio > 0:
            raise ValueError(f"Augmentation ratio must be positive, got {self.ratio}.")
        if not self.temperature > 0:
            raise ValueError(f"Selection temperature must be positive, got {self.temperature}.")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Segment(NamedTuple):
    """
    ``h`` consecutive logged steps of trajectory ``traj_id`` starting at index ``start``;
    ``first_step`` is the global step index of that first step.
    """

    traj_id: int
    start: int
    first_step: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    cumulative_reward: float

    @property
    def length(self):
        return len(self.rewards)


def _make_segment(traj, traj_id, start, h):
    stop = start + h
    return Segment(
        traj_id,
        start,
        traj.start_step + start,
        traj.states[start:stop],
        traj.actions[start:stop],
        traj.rewards[start:stop],
        traj.terminals[start:stop],
        float(traj.rewards[start:stop].sum()),
    )


def _check_segment(seg):
    h = len(seg.rewards)
    if h < 2 or len(seg.states) != h or len(seg.actions) != h:
        raise ValueError(f"Segment of trajectory {seg.traj_id} at {seg.start} is malformed.")
    if np.any(seg.terminals[:-1]):
        raise ValueError(f"Segment of trajectory {seg.traj_id} at {seg.start} crosses a terminal step.")


def perturb_action(a, eps, rng, low=-1.0, high=1.0):
    """
    Adds an independent uniform(-eps, eps) draw to every action component and clamps to the bounds.

    :param a: action vector, or (B, action_dim) batch
    :param eps: noise half-range, >= 0
    :param rng: :py:class:`trajaug.utils.SplitMix64` stream (or anything with ``uniform``)
    :param low: lower action bound
    :param high: upper action bound
    :return: perturbed copy of ``a``
    """
    if eps < 0:
        raise ValueError(f"Noise range must be non-negative, got {eps}.")
    a = np.array(a, dtype=np.float64)
    noise = rng.uniform(-eps, eps, a.shape)
    return np.clip(a + noise, low, high)


def split_segments(d, h):
    """
    Non-overlapping segments at offsets 0, h, 2h, ... of every trajectory. Remainders shorter than h
    and windows with a terminal before their last step are dropped.

    :param d: :py:class:`trajaug.datasets.OfflineDataset`
    :param h: segment length, >= 2
    :return: :py:class:`list` of :py:class:`Segment`
    """
    if h < 2:
        raise ValueError(f"Segment length must be at least 2, got {h}.")
    segments = []
    for traj_id, traj in enumerate(d):
        for start in range(0, len(traj) - h + 1, h):
            if np.any(traj.terminals[start : start + h - 1]):
                continue
            segments.append(_make_segment(traj, traj_id, start, h))
    return segments


def selection_probabilities(segments, cfg):
    """
    First-draw softmax probabilities over cumulative rewards.

    :param segments: :py:class:`list` of :py:class:`Segment`
    :param cfg: :py:class:`GenerationConfig`
    :return: :py:class:`numpy.ndarray`
    """
    return softmax(selection_logits(segments, cfg))


def selection_logits(segments, cfg):
    """
    Softmax logits of the segments: cumulative rewards, z-scored when ``cfg.normalize_returns``,
    divided by the selection temperature.

    :param segments: :py:class:`list` of :py:class:`Segment`
    :param cfg: :py:class:`GenerationConfig`
    :return: :py:class:`numpy.ndarray`
    """
    returns = np.array([s.cumulative_reward for s in segments], dtype=np.float64)
    if len(returns) == 0:
        raise ValueError("No segments to select from.")
    if cfg.normalize_returns:
        std = returns.std()
        returns = (returns - returns.mean()) / std if std > 0 else np.zeros_like(returns)
    return returns / cfg.temperature


def _draw_without_replacement(logits, n, rng):
    # renormalized over the remaining logits each draw; the max entry always keeps mass
    logits = np.array(logits, dtype=np.float64)
    remaining = np.arange(len(logits))
    chosen = []
    for _ in range(n):
        p = softmax(logits[remaining])
        cdf = np.cumsum(p)
        u = rng.random() * cdf[-1]
        k = min(int(np.searchsorted(cdf, u, side="right")), len(remaining) - 1)
        if p[k] == 0:
            k = int(np.flatnonzero(p > 0)[-1])
        chosen.append(int(remaining[k]))
        remaining = np.delete(remaining, k)
    return chosen


def _random_segments(dataset, h, n, rng):
    eligible = [i for i, t in enumerate(dataset) if len(t) >= h]
    if not eligible:
        raise ValueError(f"No trajectory is long enough for segments of length {h}.")
    candidates = 0
    for i in eligible:
        traj = dataset[i]
        candidates += sum(1 for s in range(len(traj) - h + 1) if not np.any(traj.terminals[s : s + h - 1]))
    if n > candidates:
        warnings.warn(f"Only {candidates} distinct random segments exist, {n} were requested.")
        n = candidates
    seen = set()
    segments = []
    while len(segments) < n:
        traj_id = eligible[rng.integers(len(eligible))]
        traj = dataset[traj_id]
        start = rng.integers(len(traj) - h + 1)
        if (traj_id, start) in seen or np.any(traj.terminals[start : start + h - 1]):
            continue
        seen.add((traj_id, start))
        segments.append(_make_segment(traj, traj_id, start, h))
    return segments


def select_segments(segments, cfg, n, rng, dataset=None):
    """
    Chooses ``n`` source segments.

    ``top_n`` returns the ``n`` highest cumulative rewards, ties broken by (trajectory id, start)
    ascending. ``softmax`` draws without replacement, renormalizing after every draw. ``random`` draws
    (trajectory, start) pairs uniformly from ``dataset`` with any start in [0, len - h], without
    repeating a pair.

    :param segments: :py:class:`list` of :py:class:`Segment` from :py:func:`split_segments`
    :param cfg: :py:class:`GenerationConfig`
    :param n: number of segments
    :param rng: :py:class:`trajaug.utils.SplitMix64` stream
    :param dataset: :py:class:`trajaug.datasets.OfflineDataset`, required by the ``random`` strategy
    :return: :py:class:`list` of :py:class:`Segment`
    """
    n = int(n)
    if n <= 0:
        raise ValueError(f"Number of segments must be positive, got {n}.")
    if cfg.strategy == "random":
        if dataset is None:
            raise ValueError("The random strategy draws start points from the dataset, which was not given.")
        return _random_segments(dataset, cfg.horizon, n, rng)
    if n > len(segments):
        raise ValueError(f"Requested {n} segments but only {len(segments)} are available.")
    if cfg.strategy == "top_n":
        returns = np.array([s.cumulative_reward for s in segments])
        order = np.lexsort(([s.start for s in segments], [s.traj_id for s in segments], -returns))
        return [segments[i] for i in order[:n]]
    if cfg.strategy == "softmax":
        return [segments[i] for i in _draw_without_replacement(selection_logits(segments, cfg), n, rng)]
    raise NotImplementedError(f"Strategy {cfg.strategy} is not implemented.")


def n_segments(dataset, cfg):
    """
    Number of generated trajectories ``N = floor(ratio * |D| / h)``.
    """
    return int(math.floor(cfg.ratio * dataset.n_transitions / cfg.horizon + 1e-9))


class GeneratedTrajectory(NamedTuple):
    """
    One rollout. ``states[0]`` is the real state at ``start``; ``next_states[i]`` is the prediction
    following ``actions[i]``. ``rewards`` are the raw ensemble means until corrected.
    """

    traj_id: int
    start: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    state_std: np.ndarray
    reward_std: np.ndarray

    @property
    def length(self):
        return len(self.rewards)

    def to_trajectory(self, rewards=None):
        """
        :param rewards: corrected rewards; the raw predictions if omitted
        :return: :py:class:`trajaug.datasets.Trajectory` with source ``generated``
        """
        rewards = self.rewards if rewards is None else rewards
        return datasets.Trajectory(
            self.states,
            self.actions,
            rewards,
            np.zeros(self.length, dtype=bool),
            start_step=self.start,
            source="generated",
        )


def history_prefix(trajectory, start, context_len):
    """
    Up to ``context_len - 1`` real (state, action, step) rows preceding ``start``.
    """
    first = max(0, start - (context_len - 1))
    steps = trajectory.start_step + np.arange(first, start, dtype=np.int64)
    return trajectory.states[first:start], trajectory.actions[first:start], steps


def rollout_segments(segments, bundle, histories, cfg, rngs, action_low=-1.0, action_high=1.0):
    """
    Rolls out several segments in lockstep. Segment ``k`` uses ``rngs[k]`` for its perturbations only,
    so every rollout is reproducible on its own.

    :param segments: :py:class:`list` of :py:class:`Segment`, all of length ``cfg.horizon``
    :param bundle: :py:class:`trajaug.worldtrain.EnsembleBundle` or an object with the same query interface
    :param histories: per segment, the (states, actions, steps) prefix from :py:func:`history_prefix`
    :param cfg: :py:class:`GenerationConfig`
    :param rngs: per segment random stream
    :param action_low: lower action bound
    :param action_high: upper action bound
    :return: :py:class:`list` of :py:class:`GeneratedTrajectory`
    """
    if not segments:
        return []
    for seg in segments:
        _check_segment(seg)
        if seg.length != cfg.horizon:
            raise ValueError(f"Segment length {seg.length} differs from the generation horizon {cfg.horizon}.")
    h, L = cfg.horizon, bundle.context_len
    n = len(segments)
    d_s, d_a = segments[0].states.shape[1], segments[0].actions.shape[1]
    states = np.empty((n, h, d_s))
    actions = np.empty((n, h, d_a))
    rewards = np.empty((n, h))
    next_states = np.empty((n, h, d_s))
    state_std = np.empty((n, h, d_s))
    reward_std = np.empty((n, h))

    current = np.stack([seg.states[0] for seg in segments])
    for i in range(h):
        states[:, i] = current
        for k, seg in enumerate(segments):
            actions[k, i] = perturb_action(seg.actions[i], cfg.noise, rngs[k], action_low, action_high)
        windows = []
        for k, seg in enumerate(segments):
            prefix_states, prefix_actions, prefix_steps = histories[k]
            windows.append(
                seqcore.build_window(
                    np.concatenate([prefix_states, states[k, : i + 1]]),
                    np.concatenate([prefix_actions, actions[k, : i + 1]]),
                    np.concatenate([prefix_steps, seg.first_step + np.arange(i + 1)]),
                    bundle.statistics,
                    L,
                )
            )
        window = seqcore.stack_windows(windows)
        next_states[:, i], state_std[:, i] = bundle.predict_state(window)
        rewards[:, i], reward_std[:, i] = bundle.predict_reward(window)
        current = next_states[:, i]

    return [
        GeneratedTrajectory(
            seg.traj_id,
            seg.first_step,
            states[k],
            actions[k],
            rewards[k],
            next_states[k],
            state_std[k],
            reward_std[k],
        )
        for k, seg in enumerate(segments)
    ]


def rollout_segment(seg, bundle, history, cfg, rng, action_low=-1.0, action_high=1.0):
    """
    Generates ``h`` steps from ``seg``: at every step the logged action is perturbed, the window of
    the last L (state, action) pairs is built from the real prefix, the real start state and the
    states generated so far, and the ensembles predict the next state and reward.

    :param seg: :py:class:`Segment`
    :param bundle: :py:class:`trajaug.worldtrain.EnsembleBundle`
    :param history: (states, actions, steps) prefix preceding the segment
    :param cfg: :py:class:`GenerationConfig`
    :param rng: random stream for the perturbations
    :param action_low: lower action bound
    :param action_high: upper action bound
    :return: :py:class:`GeneratedTrajectory`
    """
    return rollout_segments([seg], bundle, [history], cfg, [rng], action_low, action_high)[0]


def generate_trajectories(dataset, bundle, cfg, n=None):
    """
    Splits, selects and rolls out ``n`` segments (by default ``floor(ratio * |D| / h)``).

    :param dataset: original :py:class:`trajaug.datasets.OfflineDataset`
    :param bundle: :py:class:`trajaug.worldtrain.EnsembleBundle`
    :param cfg: :py:class:`GenerationConfig`
    :param n: number of rollouts
    :return: :py:class:`list` of :py:class:`GeneratedTrajectory` in selection order
    """
    env = environments.get_env(dataset.env_id)
    n = n_segments(dataset, cfg) if n is None else int(n)
    if n == 0:
        warnings.warn(f"Augmentation ratio {cfg.ratio} yields no trajectory of length {cfg.horizon}.")
        return []
    segments = split_segments(dataset, cfg.horizon) if cfg.strategy != "random" else []
    selection_rng = utils.SplitMix64(utils.derive_seed(cfg.seed, _SELECTION_STREAM))
    selected = select_segments(segments, cfg, n, selection_rng, dataset=dataset)
    rngs = [utils.SplitMix64(utils.derive_seed(cfg.seed, _ROLLOUT_STREAM, k)) for k in range(len(selected))]
    histories = [history_prefix(dataset[seg.traj_id], seg.start, bundle.context_len) for seg in selected]
    logger.info("Rolling out %d %s segments of length %d.", len(selected), cfg.strategy, cfg.horizon)
    return rollout_segments(selected, bundle, histories, cfg, rngs, env.action_low, env.action_high)


def generate_augmentation(dataset, bundle, gen_cfg, eval_cfg=None):
    """
    Generated trajectories with evaluator-corrected rewards, as a dataset sharing the original statistics.

    :param dataset: original :py:class:`trajaug.datasets.OfflineDataset`
    :param bundle: :py:class:`trajaug.worldtrain.EnsembleBundle`
    :param gen_cfg: :py:class:`GenerationConfig`
    :param eval_cfg: :py:class:`trajaug.evaluator.EvaluatorConfig`
    :return: :py:class:`trajaug.datasets.OfflineDataset` with source ``generated``
    """
    eval_cfg = eval_cfg or evaluator.EvaluatorConfig()
    generated = generate_trajectories(dataset, bundle, gen_cfg)
    trajectories = [g.to_trajectory(evaluator.correct_trajectory(g, eval_cfg)) for g in generated]
    return datasets.OfflineDataset(
        trajectories,
        dataset.env_id,
        seed=gen_cfg.seed,
        statistics=dataset.statistics,
        policy_id=dataset.policy_id,
        source="generated",
    )


def rollout_errors(generated, env, rewards=None):
    """
    Per-step absolute errors of generated trajectories against the true environment executing the same
    actions from the same real start state.

    :param generated: :py:class:`list` of :py:class:`GeneratedTrajectory` of equal length
    :param env: :py:class:`trajaug.environments.EnvSpec`
    :param rewards: per-trajectory rewards to compare (for example corrected ones); raw predictions if omitted
    :return: tuple (state L1 errors (n, h), reward absolute errors (n, h))
    """
    if not generated:
        raise ValueError("No generated trajectories to compare.")
    actions = np.stack([g.actions for g in generated])
    predicted = np.stack([g.next_states for g in generated])
    predicted_rewards = np.stack([g.rewards for g in generated]) if rewards is None else np.asarray(rewards)
    state = np.stack([g.states[0] for g in generated])
    true_states = np.empty_like(predicted)
    true_rewards = np.empty(predicted_rewards.shape)
    for i in range(actions.shape[1]):
        state, reward, _ = environments.step_env(env, state, actions[:, i])
        true_states[:, i] = state
        true_rewards[:, i] = reward
    return np.abs(predicted - true_states).sum(axis=-1), np.abs(predicted_rewards - true_rewards)


def prediction_error_profile(dataset, bundle, cfg, n_rollouts=100):
    """
    Mean per-step rollout errors of the full ensemble and of its last single snapshot on the same
    selected segments with the same perturbed actions.

    :param dataset: original :py:class:`trajaug.datasets.OfflineDataset`
    :param bundle: :py:class:`trajaug.worldtrain.EnsembleBundle`
    :param cfg: :py:class:`GenerationConfig`
    :param n_rollouts: number of rollouts
    :return: :py:class:`pandas.DataFrame` indexed by step
    """
    env = environments.get_env(dataset.env_id)
    result = {}
    for name, b in (("ensemble", bundle), ("single", bundle.single())):
        generated = generate_trajectories(dataset, b, cfg, n=n_rollouts)
        state_err, reward_err = rollout_errors(generated, env)
        result[f"{name}_state_l1"] = state_err.mean(axis=0)
        result[f"{name}_reward_l1"] = reward_err.mean(axis=0)
    df = pd.DataFrame(result)
    df.index.name = "step"
    return df
