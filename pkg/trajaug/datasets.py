"""
datasets.py
Functions and classes for handling trajectories and offline datasets.
"""

import os
import json
import logging
import warnings
from typing import NamedTuple

import numpy as np
import pandas as pd

from . import environments, utils

logger = logging.getLogger(__name__)

POLICY_IDS = ("expert", "medium", "medium_expert", "medium_replay", "random")
SOURCES = ("collected", "generated")
FORMAT_VERSION = 1
MEDIUM_NOISE = 0.5
REPLAY_SCALES = tuple(round(0.1 * i, 1) for i in range(1, 10))


class DatasetFormatError(ValueError):
    """
    Raised when a dataset directory cannot be read. ``code`` distinguishes the failure.
    """

    code = "dataset_format"

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class CorruptHeaderError(DatasetFormatError):
    code = "corrupt_header"


class DimensionMismatchError(DatasetFormatError):
    code = "dimension_mismatch"


class TruncatedPayloadError(DatasetFormatError):
    code = "truncated_payload"


class EmptyDatasetError(DatasetFormatError):
    code = "empty_dataset"


class Step(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    terminal: bool
    t: int


class Trajectory:
    """
    Store one trajectory as column arrays. Steps carry global indices ``start_step, start_step + 1, ...``;
    collected trajectories start at 0, generated ones keep the start index of their source segment.
    """

    def __init__(self, states, actions, rewards, terminals=None, start_step=0, source="collected"):
        """
        :param states: array (T, state_dim)
        :param actions: array (T, action_dim)
        :param rewards: array (T,)
        :param terminals: boolean array (T,), all False if omitted
        :param start_step: integer index of the first step
        :param source: ``collected`` or ``generated``
        :return: None
        """
        self.states = np.array(states, dtype=np.float64, ndmin=2)
        self.actions = np.array(actions, dtype=np.float64, ndmin=2)
        self.rewards = np.array(rewards, dtype=np.float64).reshape(-1)
        n = len(self.rewards)
        if terminals is None:
            terminals = np.zeros(n, dtype=bool)
        self.terminals = np.array(terminals, dtype=bool).reshape(-1)
        self.start_step = int(start_step)
        self.source = source

        if n == 0:
            raise ValueError("Trajectory must contain at least one step.")
        if not (len(self.states) == len(self.actions) == len(self.terminals) == n):
            raise ValueError(
                f"Trajectory columns disagree in length: {len(self.states)} states, {len(self.actions)} actions, "
                f"{n} rewards, {len(self.terminals)} terminals."
            )
        if source not in SOURCES:
            raise ValueError(f"Unknown trajectory source {source}. Source must be any of: collected, generated.")
        if self.start_step < 0:
            raise ValueError(f"Start step must be non-negative, got {self.start_step}.")
        if np.any(self.terminals[:-1]):
            raise ValueError("Terminal flag set before the final step of a trajectory.")
        for column in (self.states, self.actions, self.rewards):
            column.setflags(write=False)
        self.terminals.setflags(write=False)

    @classmethod
    def from_steps(cls, steps, source="collected"):
        """
        Builds a trajectory from a sequence of :py:class:`Step`.

        :param steps: list of :py:class:`Step` with contiguous ``t``
        :param source: ``collected`` or ``generated``
        :return: :py:class:`Trajectory`
        """
        steps = list(steps)
        if not steps:
            raise ValueError("Trajectory must contain at least one step.")
        indices = [s.t for s in steps]
        if any(b != a + 1 for a, b in zip(indices, indices[1:])):
            raise ValueError(f"Step indices must be contiguous and increasing, got {indices}.")
        return cls(
            [s.state for s in steps],
            [s.action for s in steps],
            [s.reward for s in steps],
            [s.terminal for s in steps],
            start_step=indices[0],
            source=source,
        )

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i):
        return self.get_steps()[i]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return False
        return (
            self.start_step == other.start_step
            and self.source == other.source
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.terminals, other.terminals)
        )

    def __ne__(self, other):
        return not self.__eq__(other)

    @property
    def steps(self):
        return self.get_steps()

    def get_steps(self):
        """
        :return: :py:class:`list` of :py:class:`Step`
        """
        return [
            Step(self.states[i], self.actions[i], float(self.rewards[i]), bool(self.terminals[i]), self.start_step + i)
            for i in range(len(self))
        ]

    def get_return(self):
        return float(self.rewards.sum())

    def to_rows(self):
        """
        Step rows laid out as ``[state | action | reward | terminal]``.

        :return: :py:class:`numpy.ndarray` of shape (T, state_dim + action_dim + 2)
        """
        return np.concatenate(
            [self.states, self.actions, self.rewards[:, None], self.terminals[:, None].astype(np.float64)], axis=1
        )


class Statistics:
    """
    Per-dimension normalization statistics of a dataset.
    """

    fields = ("state_mean", "state_std", "action_mean", "action_std", "reward_mean", "reward_std")

    def __init__(self, state_mean, state_std, action_mean, action_std, reward_mean, reward_std):
        self.state_mean = np.asarray(state_mean, dtype=np.float64).reshape(-1)
        self.state_std = np.asarray(state_std, dtype=np.float64).reshape(-1)
        self.action_mean = np.asarray(action_mean, dtype=np.float64).reshape(-1)
        self.action_std = np.asarray(action_std, dtype=np.float64).reshape(-1)
        self.reward_mean = float(reward_mean)
        self.reward_std = float(reward_std)

    @classmethod
    def from_trajectories(cls, trajectories):
        """
        Computes statistics over every step of the given trajectories. Standard deviations below
        :py:data:`trajaug.utils.STD_FLOOR` are clamped to the floor.

        :param trajectories: iterable of :py:class:`Trajectory`
        :return: :py:class:`Statistics`
        """
        trajectories = list(trajectories)
        states = np.concatenate([t.states for t in trajectories])
        actions = np.concatenate([t.actions for t in trajectories])
        rewards = np.concatenate([t.rewards for t in trajectories])
        raw = [states.std(axis=0), actions.std(axis=0), np.atleast_1d(rewards.std())]
        if any(np.any(s < utils.STD_FLOOR) for s in raw):
            warnings.warn(f"Standard deviation below {utils.STD_FLOOR} clamped to the floor.")
        return cls(
            states.mean(axis=0),
            utils.floor_std(raw[0]),
            actions.mean(axis=0),
            utils.floor_std(raw[1]),
            rewards.mean(),
            float(utils.floor_std(raw[2])[0]),
        )

    def to_dict(self):
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(d[f] for f in cls.fields))

    def __eq__(self, other):
        if not isinstance(other, Statistics):
            return False
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.fields)

    def __ne__(self, other):
        return not self.__eq__(other)

    def normalize_states(self, states):
        return (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std

    def normalize_actions(self, actions):
        return (np.asarray(actions, dtype=np.float64) - self.action_mean) / self.action_std


class OfflineDataset:
    """
    Immutable collection of trajectories with normalization statistics and provenance metadata.
    """

    def __init__(self, trajectories, env_id, seed=0, statistics=None, policy_id=None, source="collected"):
        """
        :param trajectories: iterable of :py:class:`Trajectory`
        :param env_id: string name of the environment the data belongs to
        :param seed: integer seed the data was produced with
        :param statistics: :py:class:`Statistics`; computed from the collected trajectories if omitted
        :param policy_id: name of the behavior policy, if any
        :param source: ``collected``, ``generated`` or ``mixed``
        :return: None
        """
        self._trajectories = tuple(trajectories)
        self.env_id = str(env_id)
        self.seed = int(seed)
        self.policy_id = policy_id
        self.source = source
        if self._trajectories:
            dims = {(t.states.shape[1], t.actions.shape[1]) for t in self._trajectories}
            if len(dims) != 1:
                raise ValueError(f"Trajectories disagree in state/action dimensions: {sorted(dims)}.")
            self.state_dim, self.action_dim = dims.pop()
        else:
            env = environments.get_env(self.env_id)
            self.state_dim, self.action_dim = env.state_dim, env.action_dim
        if statistics is None:
            collected = [t for t in self._trajectories if t.source == "collected"]
            if not collected:
                raise ValueError("Statistics must be given for a dataset without collected trajectories.")
            statistics = Statistics.from_trajectories(collected)
        if len(statistics.state_mean) != self.state_dim or len(statistics.action_mean) != self.action_dim:
            raise ValueError("Statistics dimensions do not match the trajectories.")
        self.statistics = statistics

    def __len__(self):
        return len(self._trajectories)

    def __iter__(self):
        return iter(self._trajectories)

    def __getitem__(self, i):
        return self._trajectories[i]

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return False
        return (
            self.env_id == other.env_id
            and self.seed == other.seed
            and self.policy_id == other.policy_id
            and self.source == other.source
            and self.statistics == other.statistics
            and self._trajectories == other._trajectories
        )

    def __ne__(self, other):
        return not self.__eq__(other)

    @property
    def trajectories(self):
        return self._trajectories

    @property
    def n_transitions(self):
        """
        Total number of steps, ``|D|``.
        """
        return int(sum(len(t) for t in self._trajectories))

    @property
    def n_generated(self):
        return int(sum(len(t) for t in self._trajectories if t.source == "generated"))

    @property
    def horizon(self):
        return max((t.start_step + len(t) for t in self._trajectories), default=0)

    def get_dataframe(self, columns=None):
        """
        Access a per-trajectory summary as a :py:class:`pandas.DataFrame`

        :param columns: :py:class:`list` of columns which should be returned
        :return: :py:class:`pandas.DataFrame` with source, start_step, length and return
        """
        df = pd.DataFrame(
            {
                "source": [t.source for t in self._trajectories],
                "start_step": [t.start_step for t in self._trajectories],
                "length": [len(t) for t in self._trajectories],
                "return": [t.get_return() for t in self._trajectories],
            }
        )
        if columns:
            return df[columns]
        return df


def _behavior_actions(env, policy_id, states, noise):
    expert = environments.expert_action(env, states)
    if policy_id == "expert":
        return expert
    if policy_id == "random":
        return env.action_low + (env.action_high - env.action_low) * noise
    return env.clip_action(expert + noise)


def collect_dataset(env, policy_id, n_traj, seed):
    """
    Collects ``n_traj`` full-horizon trajectories with a scripted behavior policy.

    Every trajectory owns a :py:class:`trajaug.utils.SplitMix64` stream keyed by (seed, trajectory index).
    Draw order per stream: the initial state, then (medium_replay only) the noise scale, then the
    per-step action noise.

    :param env: :py:class:`trajaug.environments.EnvSpec` or registered environment name
    :param policy_id: one of ``expert``, ``medium``, ``medium_expert``, ``medium_replay``, ``random``
    :param n_traj: number of trajectories
    :param seed: integer seed
    :return: :py:class:`OfflineDataset`
    """
    if isinstance(env, str):
        env = environments.get_env(env)
    if policy_id not in POLICY_IDS:
        raise ValueError(f"Unknown policy {policy_id}. Policy must be any of: {', '.join(POLICY_IDS)}.")
    n_traj = int(n_traj)
    if n_traj < 1:
        raise ValueError(f"At least one trajectory must be collected, got {n_traj}.")

    initial = np.empty((n_traj, env.state_dim))
    noise = np.zeros((n_traj, env.horizon, env.action_dim))
    kinds = []
    for i in range(n_traj):
        rng = utils.SplitMix64(utils.derive_seed(seed, i))
        initial[i] = env.sample_initial_states(rng)
        kind = policy_id
        if policy_id == "medium_expert":
            kind = "expert" if i % 2 == 0 else "medium"
        kinds.append(kind)
        if kind == "medium":
            noise[i] = rng.uniform(-MEDIUM_NOISE, MEDIUM_NOISE, (env.horizon, env.action_dim))
        elif kind == "medium_replay":
            scale = REPLAY_SCALES[rng.integers(len(REPLAY_SCALES))]
            noise[i] = rng.uniform(-scale, scale, (env.horizon, env.action_dim))
        elif kind == "random":
            noise[i] = rng.random((env.horizon, env.action_dim))

    kinds = np.asarray(kinds)
    behavior = np.where(kinds == "medium_replay", "medium", kinds)

    def act(states, t):
        actions = np.empty((n_traj, env.action_dim))
        for kind in np.unique(behavior):
            rows = behavior == kind
            actions[rows] = _behavior_actions(env, kind, states[rows], noise[rows, t])
        return actions

    states, actions, rewards = environments.run_episodes(env, act, initial)
    terminals = np.zeros(env.horizon, dtype=bool)
    terminals[-1] = True
    trajectories = [Trajectory(states[i], actions[i], rewards[i], terminals) for i in range(n_traj)]
    logger.info("Collected %d %s trajectories on %s (seed %d).", n_traj, policy_id, env.env_id, seed)
    return OfflineDataset(trajectories, env.env_id, seed=seed, policy_id=policy_id)


def measure_reference_returns(env, episodes=1000, seed=0):
    """
    Mean returns of the uniform-random and the expert policy.

    :param env: :py:class:`trajaug.environments.EnvSpec`
    :param episodes: number of episodes per policy
    :param seed: integer seed
    :return: tuple (J_random, J_expert)
    """
    j_random = float(np.mean([t.get_return() for t in collect_dataset(env, "random", episodes, seed)]))
    j_expert = float(np.mean([t.get_return() for t in collect_dataset(env, "expert", episodes, seed)]))
    logger.info("Reference returns of %s: random %.4f, expert %.4f.", env.env_id, j_random, j_expert)
    return j_random, j_expert


def augmentation_ratio(original, augmented):
    """
    Augmentation ratio ``|D_aug| / |D|`` in transitions.

    :param original: :py:class:`OfflineDataset`
    :param augmented: :py:class:`OfflineDataset` (or None for no augmentation)
    :return: float
    """
    n_original = original.n_transitions
    if n_original == 0:
        raise ValueError("Original dataset contains no transitions.")
    n_augmented = 0 if augmented is None else augmented.n_transitions
    return n_augmented / n_original


def mix_datasets(original, augmented):
    """
    Mixed view of original and generated trajectories. The original statistics are kept.

    :param original: :py:class:`OfflineDataset`
    :param augmented: :py:class:`OfflineDataset` or None
    :return: :py:class:`OfflineDataset` with source ``mixed``
    """
    if augmented is None or len(augmented) == 0:
        return original
    if augmented.env_id != original.env_id:
        raise ValueError(f"Cannot mix data of {original.env_id} with data of {augmented.env_id}.")
    return OfflineDataset(
        list(original) + list(augmented),
        original.env_id,
        seed=original.seed,
        statistics=original.statistics,
        policy_id=original.policy_id,
        source="mixed",
    )


def write_dataset(d, path):
    """
    Writes a dataset directory with ``meta.json`` and ``data.bin`` (little-endian float64 rows
    ``[state | action | reward | terminal]``, trajectories concatenated, no padding).

    :param d: :py:class:`OfflineDataset`
    :param path: directory path, created if missing
    :return: None
    """
    if len(d) == 0:
        raise EmptyDatasetError("Refusing to write a dataset without trajectories.", path)
    os.makedirs(path, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "env_id": d.env_id,
        "d_s": d.state_dim,
        "d_a": d.action_dim,
        "n_traj": len(d),
        "horizon": d.horizon,
        "seed": d.seed,
        "policy_id": d.policy_id,
        "source": d.source,
        "statistics": d.statistics.to_dict(),
        "lengths": [len(t) for t in d],
        "start_steps": [t.start_step for t in d],
        "sources": [t.source for t in d],
    }
    payload = np.concatenate([t.to_rows() for t in d]).astype("<f8")
    with open(os.path.join(path, "meta.json"), "w") as file:
        json.dump(meta, file, indent=2, sort_keys=True)
        file.write("\n")
    with open(os.path.join(path, "data.bin"), "wb") as file:
        file.write(payload.tobytes())


def _read_meta(path):
    try:
        with open(os.path.join(path, "meta.json")) as file:
            meta = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptHeaderError(f"Cannot parse meta.json in {path}: {e}", path)
    required = ["format_version", "env_id", "d_s", "d_a", "n_traj", "seed", "statistics", "lengths"]
    missing = [key for key in required if key not in meta]
    if missing:
        raise CorruptHeaderError(f"meta.json in {path} lacks {', '.join(missing)}.", path)
    if meta["format_version"] != FORMAT_VERSION:
        raise CorruptHeaderError(f"Unsupported format version {meta['format_version']} in {path}.", path)
    return meta


def read_dataset(path):
    """
    Reads a dataset directory written by :py:func:`write_dataset`.

    :param path: directory path
    :return: :py:class:`OfflineDataset`
    """
    meta = _read_meta(path)
    d_s, d_a, n_traj = int(meta["d_s"]), int(meta["d_a"]), int(meta["n_traj"])
    lengths = [int(n) for n in meta["lengths"]]
    if n_traj == 0 or not lengths or min(lengths) == 0:
        raise EmptyDatasetError(f"Dataset in {path} contains an empty trajectory.", path)
    if len(lengths) != n_traj:
        raise CorruptHeaderError(f"meta.json in {path} lists {len(lengths)} lengths for {n_traj} trajectories.", path)
    start_steps = [int(s) for s in meta.get("start_steps", [0] * n_traj)]
    sources = list(meta.get("sources", ["collected"] * n_traj))
    if len(start_steps) != n_traj or len(sources) != n_traj:
        raise CorruptHeaderError(f"Per-trajectory metadata in {path} does not match n_traj={n_traj}.", path)
    try:
        statistics = Statistics.from_dict(meta["statistics"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptHeaderError(f"Cannot parse statistics in {path}: {e}", path)
    if len(statistics.state_mean) != d_s or len(statistics.state_std) != d_s or len(statistics.action_mean) != d_a:
        raise DimensionMismatchError(f"Statistics in {path} do not match d_s={d_s}, d_a={d_a}.", path)

    try:
        with open(os.path.join(path, "data.bin"), "rb") as file:
            raw = file.read()
    except OSError as e:
        raise TruncatedPayloadError(f"Cannot read the payload of {path}: {e}", path)
    width = d_s + d_a + 2
    total_steps = sum(lengths)
    expected = total_steps * width
    if len(raw) % 8 != 0:
        raise TruncatedPayloadError(f"Payload of {path} is not a whole number of float64 values.", path)
    values = np.frombuffer(raw, dtype="<f8")
    if values.size < expected:
        raise TruncatedPayloadError(f"Payload of {path} holds {values.size} values, expected {expected}.", path)
    if values.size > expected:
        if values.size % total_steps == 0:
            raise DimensionMismatchError(
                f"Payload of {path} has {values.size // total_steps} columns per step, header implies {width}.", path
            )
        raise DimensionMismatchError(f"Payload of {path} holds {values.size} values, expected {expected}.", path)
    rows = values.astype(np.float64).reshape(total_steps, width)

    trajectories = []
    offset = 0
    for length, start, source in zip(lengths, start_steps, sources):
        block = rows[offset : offset + length]
        offset += length
        trajectories.append(
            Trajectory(
                block[:, :d_s],
                block[:, d_s : d_s + d_a],
                block[:, d_s + d_a],
                block[:, d_s + d_a + 1] == 1.0,
                start_step=start,
                source=source,
            )
        )
    return OfflineDataset(
        trajectories,
        meta["env_id"],
        seed=meta["seed"],
        statistics=statistics,
        policy_id=meta.get("policy_id"),
        source=meta.get("source", "collected"),
    )
