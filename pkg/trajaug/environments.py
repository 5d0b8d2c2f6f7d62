"""
environments.py
Functions and classes for the toy control environments.
"""

import os
import yaml
import numpy as np
import pandas as pd

from . import __path__, datasets

REWARD_KINDS = ("dense", "sparse")

data_path = os.path.abspath(os.path.join(__path__[0], "sample_data"))
with open(os.path.join(data_path, "environments.yml")) as file:
    env_dict = yaml.safe_load(file)


def set_data_dir(path=os.path.abspath(os.path.join(__path__[0], "sample_data"))):
    """
    Re-points the environment registry to another directory containing an ``environments.yml``

    :param path: string with path to data directory
    """
    global data_path
    global env_dict
    data_path = os.path.abspath(path)
    with open(os.path.join(data_path, "environments.yml")) as file:
        env_dict = yaml.safe_load(file)
    _cache.clear()


_cache = {}


def get_env(env_id):
    """
    Gets the :py:class:`EnvSpec` registered under ``env_id``. Specs are cached so measured
    reference returns are computed once per process.

    :param env_id: string with environment name
    :return: :py:class:`EnvSpec`
    """
    if env_id not in env_dict:
        raise ValueError(f"Environment {env_id} not found.")
    if env_id not in _cache:
        _cache[env_id] = EnvSpec(env_dict[env_id])
    return _cache[env_id]


def get_env_ids():
    """
    Get a list of registered environment names

    :return: :py:class:`list` of strings
    """
    return list(env_dict.keys())


class EnvSpec:
    """
    Store the definition of one environment: dimensions, bounds, initial-state box, reward kind
    and reference returns.
    """

    def __init__(self, d: dict):
        """
        Initialize :py:class:`EnvSpec` from a registry entry.

        :param d: :py:class:`dict` with the environment definition
        :return: None
        """
        self._data = dict(d)
        self.env_id = str(d["name"])
        self.state_dim = int(d["state_dim"])
        self.action_dim = int(d["action_dim"])
        self.horizon = int(d["horizon"])
        self.reward_kind = d.get("reward", "dense")
        self.state_low = np.asarray(d["state_low"], dtype=np.float64)
        self.state_high = np.asarray(d["state_high"], dtype=np.float64)
        self.action_low = np.asarray(d["action_low"], dtype=np.float64)
        self.action_high = np.asarray(d["action_high"], dtype=np.float64)
        self.init_low = np.asarray(d["init_low"], dtype=np.float64)
        self.init_high = np.asarray(d["init_high"], dtype=np.float64)
        self.velocity_gain = float(d.get("velocity_gain", 0.2))
        self.position_gain = float(d.get("position_gain", 0.1))
        self.goal = float(d.get("goal", 1.0))
        self.goal_band = float(d.get("goal_band", 0.1))
        self._reference_returns = None
        if d.get("J_random") is not None and d.get("J_expert") is not None:
            self._reference_returns = (float(d["J_random"]), float(d["J_expert"]))

        if d.get("dynamics", "reach") != "reach":
            raise NotImplementedError(f"Dynamics {d.get('dynamics')} not implemented. Dynamics must be: reach.")
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"Unknown reward kind {self.reward_kind}. Reward must be any of: dense, sparse.")
        if self.state_dim != 2 or self.action_dim != 1:
            raise ValueError(f"Reach dynamics need state_dim=2 and action_dim=1, got {self.state_dim}, {self.action_dim}.")
        if self.horizon < 2:
            raise ValueError(f"Horizon must be at least 2, got {self.horizon}.")
        if not np.all(self.action_low < self.action_high):
            raise ValueError(f"Action bounds of {self.env_id} are empty.")
        for name, arr, dim in [
            ("state_low", self.state_low, self.state_dim),
            ("state_high", self.state_high, self.state_dim),
            ("init_low", self.init_low, self.state_dim),
            ("init_high", self.init_high, self.state_dim),
            ("action_low", self.action_low, self.action_dim),
            ("action_high", self.action_high, self.action_dim),
        ]:
            if arr.shape != (dim,):
                raise ValueError(f"{name} of {self.env_id} must have {dim} entries, got {arr.shape}.")

    def __repr__(self):
        return f"EnvSpec({self.env_id!r})"

    def get_name(self):
        return self.env_id

    def get_reference_returns(self):
        """
        Reference returns used for score normalization. Measured once by running the uniform-random and
        the expert policy for 1000 episodes at seed 0 unless the registry already provides them.

        :return: tuple (J_random, J_expert)
        """
        if self._reference_returns is None:
            self._reference_returns = datasets.measure_reference_returns(self, episodes=1000, seed=0)
        j_random, j_expert = self._reference_returns
        if not j_expert > j_random:
            raise ValueError(f"Expert return {j_expert} of {self.env_id} does not exceed random return {j_random}.")
        return self._reference_returns

    @property
    def J_random(self):
        return self.get_reference_returns()[0]

    @property
    def J_expert(self):
        return self.get_reference_returns()[1]

    def sample_initial_states(self, rng, n=None):
        """
        Draws initial states uniformly from the initial-state box.

        :param rng: :py:class:`trajaug.utils.SplitMix64` stream
        :param n: number of states, None for a single state
        :return: :py:class:`numpy.ndarray` of shape (state_dim,) or (n, state_dim)
        """
        size = (self.state_dim,) if n is None else (int(n), self.state_dim)
        u = rng.random(size)
        return self.init_low + (self.init_high - self.init_low) * u

    def clip_action(self, action):
        return np.clip(action, self.action_low, self.action_high)

    def get_dataframe(self):
        """
        Access the environment definition as a :py:class:`pandas.Series`

        :return: :py:class:`pandas.Series`
        """
        return pd.Series(self._data)


def step_env(env, state, action):
    """
    Advances the reach dynamics by one step. Works on single states or on batches with a leading axis.

    ``v' = clamp(v + velocity_gain * a, v_low, v_high)``, ``x' = clamp(x + position_gain * v', x_low, x_high)``;
    dense reward ``-|x' - goal|``, sparse reward ``1`` inside the goal band and ``0`` outside.

    :param env: :py:class:`EnvSpec`
    :param state: array (..., state_dim)
    :param action: array (..., action_dim), clamped to the action bounds before use
    :return: tuple (next_state, reward, terminal); terminal is always False, episode ends are handled by the caller
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape[-1:] != (env.state_dim,):
        raise ValueError(f"State must have {env.state_dim} components, got shape {state.shape}.")
    if action.shape[-1:] != (env.action_dim,):
        raise ValueError(f"Action must have {env.action_dim} components, got shape {action.shape}.")
    action = env.clip_action(action)

    x = state[..., 0]
    v = state[..., 1]
    v_next = np.clip(v + env.velocity_gain * action[..., 0], env.state_low[1], env.state_high[1])
    x_next = np.clip(x + env.position_gain * v_next, env.state_low[0], env.state_high[0])
    next_state = np.stack([x_next, v_next], axis=-1)

    distance = np.abs(x_next - env.goal)
    if env.reward_kind == "dense":
        reward = -distance
    else:
        reward = (distance <= env.goal_band).astype(np.float64)

    if np.ndim(reward) == 0:
        return next_state, float(reward), False
    return next_state, reward, np.zeros(reward.shape, dtype=bool)


def expert_action(env, state):
    """
    Scripted expert controller ``clamp(1.5 * (goal - x) - 0.5 * v)``.

    :param env: :py:class:`EnvSpec`
    :param state: array (..., state_dim)
    :return: array (..., action_dim)
    """
    state = np.asarray(state, dtype=np.float64)
    a = 1.5 * (env.goal - state[..., 0]) - 0.5 * state[..., 1]
    return env.clip_action(a[..., None])


def run_episodes(env, act, initial_states):
    """
    Runs full episodes from the given initial states in lockstep.

    :param env: :py:class:`EnvSpec`
    :param act: callable mapping (states, t) to actions, both batched over episodes
    :param initial_states: array (episodes, state_dim)
    :return: tuple (states, actions, rewards) with shapes (episodes, horizon, ...)
    """
    states = np.asarray(initial_states, dtype=np.float64)
    n = states.shape[0]
    all_states = np.empty((n, env.horizon, env.state_dim))
    all_actions = np.empty((n, env.horizon, env.action_dim))
    all_rewards = np.empty((n, env.horizon))
    for t in range(env.horizon):
        actions = env.clip_action(np.asarray(act(states, t), dtype=np.float64))
        all_states[:, t] = states
        all_actions[:, t] = actions
        states, rewards, _ = step_env(env, states, actions)
        all_rewards[:, t] = rewards
    return all_states, all_actions, all_rewards
