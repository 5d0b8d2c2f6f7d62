"""
agent.py
Behavior-regularized twin-critic deterministic actor-critic (TD3+BC) on offline datasets, policy
evaluation and normalized scoring.
"""

import os
import json
import logging
from dataclasses import dataclass, asdict, field

import numpy as np
import pandas as pd

from . import datasets, environments, seqcore, utils

logger = logging.getLogger(__name__)

POLICY_VERSION = 1
_BATCH_STREAM = 21
_NOISE_STREAM = 22
_INIT_STREAM = 23
HISTORY_COLUMNS = ["step", "critic_loss", "actor_loss", "bc_error", "logged_error"]


@dataclass(frozen=True)
class AgentConfig:
    """
    TD3+BC hyperparameters. ``alpha`` trades the critic term against behavior cloning; ``history_interval``
    is the number of gradient steps between logged checkpoints.
    """

    discount: float = 0.99
    tau: float = 0.005
    alpha: float = 2.5
    hidden: tuple = (64, 64)
    steps: int = 5000
    batch_size: int = 256
    lr: float = 3e-4
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    history_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ValueError(f"Discount must lie in (0, 1), got {self.discount}.")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}.")
        if not 0 < self.tau <= 1:
            raise ValueError(f"Target smoothing rate must lie in (0, 1], got {self.tau}.")
        if self.steps < 1 or self.batch_size < 1 or self.policy_freq < 1:
            raise ValueError("steps, batch_size and policy_freq must be positive.")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class MLP:
    """
    Fully connected network with ReLU hidden layers. ``output="tanh"`` maps the last layer into
    ``[low, high]``; ``output="linear"`` leaves it unbounded.
    """

    def __init__(self, sizes, output="linear", low=-1.0, high=1.0):
        if output not in ("linear", "tanh"):
            raise ValueError(f"Unknown output {output}. Output must be any of: linear, tanh.")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.center = (np.asarray(high, dtype=np.float64) + np.asarray(low, dtype=np.float64)) / 2.0
        self.half = (np.asarray(high, dtype=np.float64) - np.asarray(low, dtype=np.float64)) / 2.0
        entries = []
        for i in range(len(self.sizes) - 1):
            entries += [(f"layers.{i}.weight", (self.sizes[i], self.sizes[i + 1])), (f"layers.{i}.bias", (self.sizes[i + 1],))]
        self.layout = seqcore.ParameterLayout(entries)
        self.n_layers = len(self.sizes) - 1

    def initialize(self, rng):
        """
        Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
        """
        flat = np.zeros(self.layout.size)
        views = self.layout.views(flat)
        for i in range(self.n_layers):
            bound = 1.0 / np.sqrt(self.sizes[i])
            views[f"layers.{i}.weight"][...] = rng.uniform(-bound, bound, (self.sizes[i], self.sizes[i + 1]))
            views[f"layers.{i}.bias"][...] = rng.uniform(-bound, bound, self.sizes[i + 1])
        return flat

    def forward(self, params, x):
        views = self.layout.views(params)
        inputs, pre = [], []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            z = h @ views[f"layers.{i}.weight"] + views[f"layers.{i}.bias"]
            pre.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        if self.output == "tanh":
            h = self.center + self.half * np.tanh(h)
        return h, (inputs, pre)

    def backward(self, params, cache, dy):
        """
        :return: tuple (flat parameter gradient, gradient with respect to the input)
        """
        inputs, pre = cache
        views = self.layout.views(params)
        grad = np.zeros(self.layout.size)
        gviews = self.layout.views(grad)
        d = dy
        if self.output == "tanh":
            d = d * self.half * (1.0 - np.tanh(pre[-1]) ** 2)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                d = d * (pre[i] > 0)
            gviews[f"layers.{i}.weight"][...] = inputs[i].T @ d
            gviews[f"layers.{i}.bias"][...] = d.sum(axis=0)
            d = d @ views[f"layers.{i}.weight"].T
        return grad, d


@dataclass
class Transitions:
    """
    Flattened transitions. ``critic_mask`` is 0 for steps with neither a terminal flag nor a successor
    inside their trajectory; those only enter the behavior-cloning term.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    not_done: np.ndarray
    critic_mask: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_dataset(cls, dataset):
        states, actions, rewards, next_states, not_done, mask = [], [], [], [], [], []
        for traj in dataset:
            n = len(traj)
            nxt = np.zeros_like(traj.states)
            nxt[:-1] = traj.states[1:]
            has_next = np.ones(n, dtype=bool)
            has_next[-1] = False
            states.append(traj.states)
            actions.append(traj.actions)
            rewards.append(traj.rewards)
            next_states.append(nxt)
            not_done.append((~traj.terminals).astype(np.float64))
            mask.append((has_next | traj.terminals).astype(np.float64))
        return cls(
            np.concatenate(states),
            np.concatenate(actions),
            np.concatenate(rewards),
            np.concatenate(next_states),
            np.concatenate(not_done),
            np.concatenate(mask),
        )


class Policy:
    """
    Deterministic actor with its twin critics and the statistics used to normalize its inputs.
    """

    def __init__(self, actor_params, critic_params, statistics, action_low, action_high, config=None, history=None):
        """
        :param actor_params: flat actor parameters
        :param critic_params: pair of flat critic parameters
        :param statistics: :py:class:`trajaug.datasets.Statistics`
        :param action_low: lower action bounds
        :param action_high: upper action bounds
        :param config: :py:class:`AgentConfig`
        :param history: :py:class:`pandas.DataFrame` of logged checkpoints
        :return: None
        """
        self.config = config or AgentConfig()
        self.statistics = statistics
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.state_dim = len(statistics.state_mean)
        self.action_dim = len(statistics.action_mean)
        self.actor, self.critic = _networks(self.state_dim, self.action_dim, self.config.hidden, self.action_low, self.action_high)
        self.actor_params = np.asarray(actor_params, dtype=np.float64)
        self.critic_params = tuple(np.asarray(p, dtype=np.float64) for p in critic_params)
        self.history = history if history is not None else pd.DataFrame()

    def act(self, states):
        """
        :param states: raw state (state_dim,) or batch (n, state_dim)
        :return: action(s) within the action bounds
        """
        states = np.asarray(states, dtype=np.float64)
        x = self.statistics.normalize_states(np.atleast_2d(states))
        actions, _ = self.actor.forward(self.actor_params, x)
        actions = np.clip(actions, self.action_low, self.action_high)
        return actions[0] if states.ndim == 1 else actions

    def q_values(self, states, actions):
        x = np.concatenate([self.statistics.normalize_states(np.atleast_2d(states)), np.atleast_2d(actions)], axis=1)
        return tuple(self.critic.forward(p, x)[0][:, 0] for p in self.critic_params)


class ControllerPolicy:
    """
    A scripted controller exposed through the :py:class:`Policy` interface, by default the expert.
    """

    def __init__(self, env, controller=None):
        self.env = env
        self.controller = controller or environments.expert_action

    def act(self, states):
        return self.env.clip_action(self.controller(self.env, states))


def _networks(state_dim, action_dim, hidden, low, high):
    actor = MLP((state_dim,) + tuple(hidden) + (action_dim,), output="tanh", low=low, high=high)
    critic = MLP((state_dim + action_dim,) + tuple(hidden) + (1,))
    return actor, critic


def _soft_update(target, source, tau):
    return tau * source + (1.0 - tau) * target


def train_policy(mixed, cfg=None):
    """
    TD3+BC on the (possibly mixed) dataset. Minibatches are drawn uniformly over all transitions.

    :param mixed: :py:class:`trajaug.datasets.OfflineDataset`
    :param cfg: :py:class:`AgentConfig`
    :return: :py:class:`Policy`
    """
    cfg = cfg or AgentConfig()
    if mixed.n_transitions == 0:
        raise ValueError("Cannot train a policy on an empty dataset.")
    env = environments.get_env(mixed.env_id)
    stats = mixed.statistics
    data = Transitions.from_dataset(mixed)
    norm_states = stats.normalize_states(data.states)
    norm_next = stats.normalize_states(data.next_states)
    actor, critic = _networks(mixed.state_dim, mixed.action_dim, cfg.hidden, env.action_low, env.action_high)

    init_rng = utils.numpy_generator(cfg.seed, _INIT_STREAM)
    actor_params = actor.initialize(init_rng)
    critic_params = [critic.initialize(init_rng), critic.initialize(init_rng)]
    actor_target = actor_params.copy()
    critic_targets = [p.copy() for p in critic_params]
    opt = dict(weight_decay=0.0, grad_clip=None)
    actor_state = seqcore.OptimizerState.create(actor.layout.size, **opt)
    critic_states = [seqcore.OptimizerState.create(critic.layout.size, **opt) for _ in range(2)]

    batch_rng = utils.numpy_generator(cfg.seed, _BATCH_STREAM)
    noise_rng = utils.numpy_generator(cfg.seed, _NOISE_STREAM)
    max_action = (env.action_high - env.action_low) / 2.0
    monitor = batch_rng.integers(0, len(data), size=min(len(data), 1000))
    history = []
    critic_loss, actor_loss = np.nan, np.nan

    for step in range(cfg.steps):
        idx = batch_rng.integers(0, len(data), size=cfg.batch_size)
        s, a, r = norm_states[idx], data.actions[idx], data.rewards[idx]
        s2, not_done, mask = norm_next[idx], data.not_done[idx], data.critic_mask[idx]

        noise = np.clip(noise_rng.normal(0.0, cfg.policy_noise, a.shape) * max_action, -cfg.noise_clip, cfg.noise_clip)
        next_action = np.clip(actor.forward(actor_target, s2)[0] + noise, env.action_low, env.action_high)
        x2 = np.concatenate([s2, next_action], axis=1)
        target_q = np.minimum(critic.forward(critic_targets[0], x2)[0], critic.forward(critic_targets[1], x2)[0])[:, 0]
        y = r + cfg.discount * not_done * target_q

        x = np.concatenate([s, a], axis=1)
        count = max(mask.sum(), 1.0)
        critic_loss = 0.0
        for k in range(2):
            q, cache = critic.forward(critic_params[k], x)
            err = (q[:, 0] - y) * mask
            critic_loss += float((err**2).sum() / count)
            grad, _ = critic.backward(critic_params[k], cache, (2.0 * err / count)[:, None])
            critic_params[k], critic_states[k] = seqcore.optimizer_step(critic_params[k], grad, critic_states[k], cfg.lr)
        if not np.isfinite(critic_loss):
            raise seqcore.NonFiniteError("critic", f"Critic loss is {critic_loss} at step {step}.")

        if step % cfg.policy_freq == 0:
            pi, actor_cache = actor.forward(actor_params, s)
            q, critic_cache = critic.forward(critic_params[0], np.concatenate([s, pi], axis=1))
            lam = cfg.alpha / max(float(np.abs(q).mean()), 1e-12)
            n = len(idx)
            actor_loss = float(-lam * q.mean() + np.mean((pi - a) ** 2))
            _, dx = critic.backward(critic_params[0], critic_cache, np.full((n, 1), -lam / n))
            dpi = dx[:, mixed.state_dim :] + 2.0 * (pi - a) / pi.size
            grad, _ = actor.backward(actor_params, actor_cache, dpi)
            actor_params, actor_state = seqcore.optimizer_step(actor_params, grad, actor_state, cfg.lr)
            actor_target = _soft_update(actor_target, actor_params, cfg.tau)
            critic_targets = [_soft_update(t, p, cfg.tau) for t, p in zip(critic_targets, critic_params)]

        if (step + 1) % cfg.history_interval == 0 or step + 1 == cfg.steps:
            pred, _ = actor.forward(actor_params, norm_states[monitor])
            bc_error = float(np.mean((pred - environments.expert_action(env, data.states[monitor])) ** 2))
            logged_error = float(np.mean((pred - data.actions[monitor]) ** 2))
            history.append(
                {
                    "step": step + 1,
                    "critic_loss": critic_loss,
                    "actor_loss": actor_loss,
                    "bc_error": bc_error,
                    "logged_error": logged_error,
                }
            )
            logger.info(
                "Agent step %d/%d critic %.5f actor %.5f bc %.5f logged %.5f",
                step + 1,
                cfg.steps,
                critic_loss,
                actor_loss,
                bc_error,
                logged_error,
            )

    return Policy(
        actor_params,
        critic_params,
        stats,
        env.action_low,
        env.action_high,
        config=cfg,
        history=pd.DataFrame(history, columns=HISTORY_COLUMNS),
    )


def evaluate_policy(env, p, episodes, seed):
    """
    Mean undiscounted return of the deterministic policy over full episodes. Episode ``i`` starts from an
    initial state drawn from the stream keyed by (seed, i).

    :param env: :py:class:`trajaug.environments.EnvSpec`
    :param p: :py:class:`Policy` or :py:class:`ControllerPolicy`
    :param episodes: number of episodes, >= 1
    :param seed: integer seed
    :return: float
    """
    episodes = int(episodes)
    if episodes < 1:
        raise ValueError(f"At least one episode must be evaluated, got {episodes}.")
    initial = np.stack([env.sample_initial_states(utils.SplitMix64(utils.derive_seed(seed, i))) for i in range(episodes)])
    _, _, rewards = environments.run_episodes(env, lambda states, t: p.act(states), initial)
    return float(rewards.sum(axis=1).mean())


def normalized_score(J, env):
    """
    ``100 * (J - J_random) / (J_expert - J_random)``.

    :param J: mean return
    :param env: :py:class:`trajaug.environments.EnvSpec`
    :return: float
    """
    j_random, j_expert = env.get_reference_returns()
    if j_expert == j_random:
        raise ValueError(f"Reference returns of {env.env_id} are degenerate ({j_random}).")
    return 100.0 * (J - j_random) / (j_expert - j_random)


def save_policy(p, path):
    """
    Writes ``policy.json`` plus ``actor.bin``, ``critic_1.bin`` and ``critic_2.bin``.

    :param p: :py:class:`Policy`
    :param path: directory path, created if missing
    :return: None
    """
    os.makedirs(path, exist_ok=True)
    meta = {
        "format_version": POLICY_VERSION,
        "config": p.config.to_dict(),
        "statistics": p.statistics.to_dict(),
        "action_low": p.action_low.tolist(),
        "action_high": p.action_high.tolist(),
        "actor_layout": p.actor.layout.manifest(),
        "critic_layout": p.critic.layout.manifest(),
    }
    with open(os.path.join(path, "policy.json"), "w") as file:
        json.dump(meta, file, indent=2, sort_keys=True)
        file.write("\n")
    seqcore.write_weights(p.actor_params, os.path.join(path, "actor.bin"))
    for k, params in enumerate(p.critic_params):
        seqcore.write_weights(params, os.path.join(path, f"critic_{k + 1}.bin"))
    p.history.to_csv(os.path.join(path, "history.csv"), index=False)


def load_policy(path):
    """
    Reads a policy directory written by :py:func:`save_policy`.

    :param path: directory path
    :return: :py:class:`Policy`
    """
    with open(os.path.join(path, "policy.json")) as file:
        meta = json.load(file)
    if meta.get("format_version") != POLICY_VERSION:
        raise ValueError(f"Unsupported policy version {meta.get('format_version')} in {path}.")
    config = AgentConfig.from_dict(meta["config"])
    statistics = datasets.Statistics.from_dict(meta["statistics"])
    actor, critic = _networks(
        len(statistics.state_mean), len(statistics.action_mean), config.hidden, meta["action_low"], meta["action_high"]
    )
    actor_params = seqcore.read_weights(os.path.join(path, "actor.bin"), actor.layout.size)
    critic_params = [seqcore.read_weights(os.path.join(path, f"critic_{k}.bin"), critic.layout.size) for k in (1, 2)]
    history_file = os.path.join(path, "history.csv")
    history = pd.read_csv(history_file) if os.path.exists(history_file) else None
    return Policy(actor_params, critic_params, statistics, meta["action_low"], meta["action_high"], config, history)
