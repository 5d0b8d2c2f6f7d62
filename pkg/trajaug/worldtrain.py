"""
worldtrain.py
Training of state and reward model ensembles with a cyclic-annealing snapshot schedule, and
ensemble mean/std queries.
"""

import os
import json
import math
import logging
from dataclasses import dataclass, asdict, field, replace

import numpy as np
import pandas as pd

from . import datasets, seqcore, utils

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
_STATE_STREAM = 11
_REWARD_STREAM = 12


@dataclass(frozen=True)
class LRSchedule:
    """
    Linear warmup followed by ``n_cycles`` cosine-annealing cycles. Defaults are the full-scale values.
    """

    base_lr: float = 1e-4
    warmup_steps: int = 100000
    cycle_steps: int = 500000
    n_cycles: int = 4

    def __post_init__(self):
        if not (self.base_lr > 0 and self.warmup_steps > 0 and self.cycle_steps > 0 and self.n_cycles > 0):
            raise ValueError(f"All schedule parameters must be positive, got {self}.")

    @property
    def total_steps(self):
        return self.warmup_steps + self.n_cycles * self.cycle_steps

    def snapshot_steps(self):
        """
        Optimizer steps after which a snapshot is taken (the last step of every cycle).
        """
        return [self.warmup_steps + (c + 1) * self.cycle_steps - 1 for c in range(self.n_cycles)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return get_schedule(d)
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None and not d:
            return get_schedule(preset)
        return cls(**d)


SCHEDULE_PRESETS = {
    "full": LRSchedule(base_lr=1e-4, warmup_steps=100000, cycle_steps=500000, n_cycles=4),
    # base_lr 1e-3 at desk scale, not the full-scale 1e-4
    "desk": LRSchedule(base_lr=1e-3, warmup_steps=2000, cycle_steps=8000, n_cycles=4),
    "smoke": LRSchedule(base_lr=1e-3, warmup_steps=10, cycle_steps=20, n_cycles=4),
}


def get_schedule(name):
    """
    Schedule presets. ``full`` uses base_lr 1e-4; the shorter ``desk`` and ``smoke`` schedules use 1e-3.

    :param name: preset name, any of ``full``, ``desk``, ``smoke``
    :return: :py:class:`LRSchedule`
    """
    if name not in SCHEDULE_PRESETS:
        raise ValueError(f"Schedule preset {name} not found. Preset must be any of: {', '.join(SCHEDULE_PRESETS)}.")
    return SCHEDULE_PRESETS[name]


def lr_at(t, sched):
    """
    Learning rate at optimizer step ``t``:
    ``(t + 1) * base_lr / T_wp`` during warmup, else
    ``base_lr / 2 * (1 + cos(pi * ((t - T_wp) mod T_cyc) / T_cyc))``.

    :param t: non-negative integer step (or integer array)
    :param sched: :py:class:`LRSchedule`
    :return: float (or array)
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0):
        raise ValueError(f"Step must be non-negative, got {t}.")
    if t_arr.ndim == 0:
        t = int(t)
        if t < sched.warmup_steps:
            return (t + 1) * sched.base_lr / sched.warmup_steps
        phase = ((t - sched.warmup_steps) % sched.cycle_steps) / sched.cycle_steps
        return sched.base_lr / 2.0 * (1.0 + math.cos(math.pi * phase))
    t_arr = t_arr.astype(np.int64)
    phase = np.mod(t_arr - sched.warmup_steps, sched.cycle_steps) / sched.cycle_steps
    cyclic = sched.base_lr / 2.0 * (1.0 + np.cos(np.pi * phase))
    return np.where(t_arr < sched.warmup_steps, (t_arr + 1) * sched.base_lr / sched.warmup_steps, cyclic)


@dataclass(frozen=True)
class WorldConfig:
    """
    Architecture and optimization settings shared by the state and the reward models. The number of
    snapshots per ensemble equals the number of schedule cycles; ``reward_schedule`` lets Q differ from K.
    """

    embed_dim: int = 32
    n_layer: int = 2
    n_head: int = 4
    dropout: float = 0.1
    context_len: int = 10
    activation: str = "relu"
    init_std: float = 0.02
    batch_size: int = 64
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    schedule: LRSchedule = field(default_factory=lambda: SCHEDULE_PRESETS["desk"])
    reward_schedule: LRSchedule = None
    log_interval: int = 1000

    def get_reward_schedule(self):
        return self.schedule if self.reward_schedule is None else self.reward_schedule

    def model_config(self, state_dim, action_dim, head_kind, max_step):
        return seqcore.SequenceModelConfig(
            state_dim=state_dim,
            action_dim=action_dim,
            head_kind=head_kind,
            embed_dim=self.embed_dim,
            n_layer=self.n_layer,
            n_head=self.n_head,
            dropout=self.dropout,
            max_step=max_step,
            context_len=self.context_len,
            activation=self.activation,
            init_std=self.init_std,
        )

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        d["reward_schedule"] = None if self.reward_schedule is None else self.reward_schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = LRSchedule.from_dict(d["schedule"])
        if d.get("reward_schedule") is not None:
            d["reward_schedule"] = LRSchedule.from_dict(d["reward_schedule"])
        return cls(**d)

    @classmethod
    def full_scale(cls):
        return cls(embed_dim=128, n_layer=10, n_head=4, context_len=20, schedule=SCHEDULE_PRESETS["full"])


class WindowSampler:
    """
    All sliding windows of a dataset, stored once in a padded concatenated layout so that a window
    ending at any step is a contiguous slice. Each trajectory block is preceded by ``L - 1`` zero rows.

    Targets per action position: the normalized state delta ``(s_{t+1} - s_t) / state_std`` (masked at the
    last step of a trajectory) and the standardized reward ``(r_t - reward_mean) / reward_std``.
    """

    def __init__(self, dataset, context_len):
        stats = dataset.statistics
        L = int(context_len)
        pad = L - 1
        lengths = np.array([len(t) for t in dataset])
        if len(lengths) == 0 or lengths.sum() == 0:
            raise ValueError("Dataset contains no steps to build windows from.")
        total = int(lengths.sum() + pad * len(lengths))
        self.context_len = L
        self.states = np.zeros((total, dataset.state_dim))
        self.actions = np.zeros((total, dataset.action_dim))
        self.steps = np.zeros(total, dtype=np.int64)
        self.valid = np.zeros(total)
        self.state_targets = np.zeros((total, dataset.state_dim))
        self.state_target_mask = np.zeros(total)
        self.reward_targets = np.zeros((total, 1))
        self.raw_states = np.zeros((total, dataset.state_dim))
        self.raw_actions = np.zeros((total, dataset.action_dim))

        ends = []
        offset = 0
        for traj in dataset:
            n = len(traj)
            rows = slice(offset + pad, offset + pad + n)
            self.states[rows] = stats.normalize_states(traj.states)
            self.actions[rows] = stats.normalize_actions(traj.actions)
            self.raw_states[rows] = traj.states
            self.raw_actions[rows] = traj.actions
            self.steps[rows] = traj.start_step + np.arange(n)
            self.valid[rows] = 1.0
            deltas = np.zeros((n, dataset.state_dim))
            deltas[:-1] = (traj.states[1:] - traj.states[:-1]) / stats.state_std
            self.state_targets[rows] = deltas
            self.state_target_mask[offset + pad : offset + pad + n - 1] = 1.0
            self.reward_targets[rows, 0] = (traj.rewards - stats.reward_mean) / stats.reward_std
            ends.append(offset + pad + np.arange(n))
            offset += pad + n
        # padded row index of every real step; a window ending there starts L - 1 rows earlier
        self.end_rows = np.concatenate(ends)
        self.state_dim = dataset.state_dim
        self.action_dim = dataset.action_dim

    def __len__(self):
        return len(self.end_rows)

    def batch(self, end_rows, head_kind):
        """
        :param end_rows: padded row indices of the final step of each window
        :param head_kind: ``state`` or ``reward``
        :return: :py:class:`trajaug.seqcore.TrainingBatch`
        """
        idx = np.asarray(end_rows)[:, None] - (self.context_len - 1) + np.arange(self.context_len)[None, :]
        window = seqcore.TokenWindow(
            self.states[idx],
            self.actions[idx],
            self.steps[idx],
            self.valid[idx],
            last_state=self.raw_states[idx[:, -1]],
            last_action=self.raw_actions[idx[:, -1]],
        )
        if head_kind == "state":
            return seqcore.TrainingBatch(window, self.state_targets[idx], self.valid[idx] * self.state_target_mask[idx])
        return seqcore.TrainingBatch(window, self.reward_targets[idx], self.valid[idx])

    def sample(self, rng, batch_size, head_kind):
        choice = rng.integers(0, len(self.end_rows), size=batch_size)
        return self.batch(self.end_rows[choice], head_kind)


class EnsembleBundle:
    """
    K state-model snapshots and Q reward-model snapshots with the statistics of the data they were trained on.
    """

    def __init__(self, state_models, reward_models, statistics, history=None):
        """
        :param state_models: list of :py:class:`trajaug.seqcore.SequenceModel` with ``head_kind="state"``
        :param reward_models: list of :py:class:`trajaug.seqcore.SequenceModel` with ``head_kind="reward"``
        :param statistics: :py:class:`trajaug.datasets.Statistics`
        :param history: :py:class:`pandas.DataFrame` of logged training steps
        :return: None
        """
        self.state_models = list(state_models)
        self.reward_models = list(reward_models)
        self.statistics = statistics
        self.history = history if history is not None else pd.DataFrame(columns=["head", "step", "lr", "loss"])
        if not self.state_models or not self.reward_models:
            raise ValueError("An ensemble needs at least one state and one reward model.")
        for kind, models in (("state", self.state_models), ("reward", self.reward_models)):
            configs = {m.config for m in models}
            if len(configs) != 1:
                raise ValueError(f"{kind} snapshots do not share one configuration.")
            if configs.pop().head_kind != kind:
                raise ValueError(f"{kind} ensemble holds models with a different head kind.")

    @property
    def K(self):
        return len(self.state_models)

    @property
    def Q(self):
        return len(self.reward_models)

    @property
    def context_len(self):
        return self.state_models[0].config.context_len

    def predict_state(self, window):
        return predict_state(self, window)

    def predict_reward(self, window):
        return predict_reward(self, window)

    def single(self):
        """
        Bundle holding only the last state and reward snapshot.
        """
        return EnsembleBundle(self.state_models[-1:], self.reward_models[-1:], self.statistics, self.history)


def _final_predictions(models, window):
    outputs = []
    for model in models:
        y = seqcore.forward(model, window)
        outputs.append(y[..., -1, :])
    return np.stack(outputs)


def predict_state(bundle, window):
    """
    Ensemble next-state prediction at the final action position: each snapshot's normalized delta is
    un-normalized and added to the raw final state; returns the mean and population std over snapshots.

    :param bundle: :py:class:`EnsembleBundle`
    :param window: :py:class:`trajaug.seqcore.TokenWindow` with ``last_state`` set
    :return: tuple (mean, per-dimension std), each (state_dim,) or (B, state_dim)
    """
    if not bundle.state_models:
        raise ValueError("Ensemble has no state models.")
    if window.last_state is None:
        raise ValueError("State prediction needs the raw final state of the window.")
    deltas = _final_predictions(bundle.state_models, window)
    next_states = window.last_state + deltas * bundle.statistics.state_std
    return utils.ensemble_moments(next_states)


def predict_reward(bundle, window):
    """
    Ensemble reward prediction at the final action position in environment units.

    :param bundle: :py:class:`EnsembleBundle`
    :param window: :py:class:`trajaug.seqcore.TokenWindow`
    :return: tuple (mean, std), floats for a single window or arrays (B,) for a batch
    """
    if not bundle.reward_models:
        raise ValueError("Ensemble has no reward models.")
    stats = bundle.statistics
    rewards = _final_predictions(bundle.reward_models, window)[..., 0] * stats.reward_std + stats.reward_mean
    mean, std = utils.ensemble_moments(rewards)
    if np.ndim(mean) == 0:
        return float(mean), float(std)
    return mean, std


def _train_head(sampler, model_config, schedule, config, batch_size, seed, stream):
    model = seqcore.SequenceModel(model_config, seed=utils.derive_seed(seed, stream, 0))
    batch_rng = utils.numpy_generator(seed, stream, 1)
    dropout_rng = utils.numpy_generator(seed, stream, 2)
    state = seqcore.OptimizerState.create(model.n_params, weight_decay=config.weight_decay, grad_clip=config.grad_clip)
    snapshot_steps = set(schedule.snapshot_steps())
    snapshots = []
    history = []
    for t in range(schedule.total_steps):
        lr = lr_at(t, schedule)
        batch = sampler.sample(batch_rng, batch_size, model_config.head_kind)
        try:
            loss, grad = seqcore.loss_and_gradients(model, batch, train=True, rng=dropout_rng)
        except seqcore.NonFiniteError as e:
            raise seqcore.NonFiniteError(
                e.layer, f"{model_config.head_kind} model diverged at step {t} (lr {lr:.3g}) in {e.layer}."
            )
        if not np.isfinite(loss):
            raise seqcore.NonFiniteError("loss", f"{model_config.head_kind} model loss is {loss} at step {t}.")
        model.params, state = seqcore.optimizer_step(model.params, grad, state, lr)
        if t in snapshot_steps:
            snapshots.append(model.copy())
            logger.info("Saved %s snapshot %d at step %d.", model_config.head_kind, len(snapshots), t)
        if t % config.log_interval == 0 or t in snapshot_steps:
            history.append({"head": model_config.head_kind, "step": t, "lr": lr, "loss": loss})
            logger.info("%s model step %d/%d lr %.3g loss %.5f", model_config.head_kind, t, schedule.total_steps, lr, loss)
    return snapshots, history


def train_world_ensemble(dataset, config=None, schedule=None, batch_size=None, seed=0):
    """
    Trains the state and the reward model, each in one pass through ``T_wp + n_cycles * T_cyc`` optimizer
    steps, harvesting a snapshot at the last step of every cycle.

    :param dataset: :py:class:`trajaug.datasets.OfflineDataset`
    :param config: :py:class:`WorldConfig`
    :param schedule: :py:class:`LRSchedule` overriding ``config.schedule`` for both heads
    :param batch_size: overrides ``config.batch_size``
    :param seed: integer seed; the two heads use independent streams
    :return: :py:class:`EnsembleBundle`
    """
    config = config or WorldConfig()
    if schedule is not None:
        config = replace(config, schedule=schedule, reward_schedule=None)
    batch_size = int(batch_size or config.batch_size)
    if dataset.n_transitions == 0:
        raise ValueError("Cannot train world models on an empty dataset.")
    if dataset.n_transitions - len(dataset) < 1:
        raise ValueError("Dataset has no step with a successor state; at least one window with a target is needed.")
    sampler = WindowSampler(dataset, config.context_len)
    max_step = int(dataset.horizon)

    state_config = config.model_config(dataset.state_dim, dataset.action_dim, "state", max_step)
    reward_config = config.model_config(dataset.state_dim, dataset.action_dim, "reward", max_step)
    logger.info("Training state ensemble on %d transitions.", dataset.n_transitions)
    state_models, state_history = _train_head(sampler, state_config, config.schedule, config, batch_size, seed, _STATE_STREAM)
    logger.info("Training reward ensemble on %d transitions.", dataset.n_transitions)
    reward_models, reward_history = _train_head(
        sampler, reward_config, config.get_reward_schedule(), config, batch_size, seed, _REWARD_STREAM
    )
    history = pd.DataFrame(state_history + reward_history, columns=["head", "step", "lr", "loss"])
    return EnsembleBundle(state_models, reward_models, dataset.statistics, history)


def held_out_mse(bundle, dataset, chunk_size=512):
    """
    One-step prediction errors of the ensemble mean on every window of ``dataset``: normalized state
    MSE (error divided by the state std) and standardized reward MSE.

    :param bundle: :py:class:`EnsembleBundle`
    :param dataset: :py:class:`trajaug.datasets.OfflineDataset`
    :param chunk_size: windows per forward pass
    :return: tuple (state_mse, reward_mse)
    """
    sampler = WindowSampler(dataset, bundle.context_len)
    stats = bundle.statistics
    state_err, state_count, reward_err = 0.0, 0.0, 0.0
    for start in range(0, len(sampler), chunk_size):
        rows = sampler.end_rows[start : start + chunk_size]
        batch = sampler.batch(rows, "state")
        mean_state, _ = predict_state(bundle, batch.window)
        has_next = batch.mask[:, -1] > 0
        true_next = batch.window.last_state + batch.targets[:, -1] * stats.state_std
        err = ((mean_state - true_next) / stats.state_std)[has_next]
        state_err += float((err**2).sum())
        state_count += err.size
        mean_reward, _ = predict_reward(bundle, batch.window)
        true_reward = sampler.reward_targets[rows, 0] * stats.reward_std + stats.reward_mean
        reward_err += float((((mean_reward - true_reward) / stats.reward_std) ** 2).sum())
    return state_err / max(state_count, 1), reward_err / len(sampler)


def uncertainty_ordering(bundle, dataset, n_windows=500, seed=0, action_offset=3.0):
    """
    Mean state uncertainty (dimension-mean ensemble std) on in-distribution windows and on the same
    windows with their final action moved ``action_offset`` action-ranges outside the data's support.

    :param bundle: :py:class:`EnsembleBundle`
    :param dataset: held-out :py:class:`trajaug.datasets.OfflineDataset`
    :param n_windows: number of query windows
    :param seed: integer seed for window selection
    :param action_offset: distance beyond the largest observed action, in units of the action range
    :return: tuple (in_distribution, out_of_support) mean uncertainties
    """
    sampler = WindowSampler(dataset, bundle.context_len)
    rng = utils.numpy_generator(seed, 0)
    rows = sampler.end_rows[rng.integers(0, len(sampler), size=n_windows)]
    batch = sampler.batch(rows, "state")
    _, std_in = predict_state(bundle, batch.window)

    raw_actions = np.concatenate([t.actions for t in dataset])
    low, high = raw_actions.min(axis=0), raw_actions.max(axis=0)
    span = np.maximum(high - low, 1e-6)
    signs = np.where(rng.random((n_windows, 1)) < 0.5, -1.0, 1.0)
    ood_raw = np.where(signs > 0, high + action_offset * span, low - action_offset * span)
    window = batch.window
    actions = window.actions.copy()
    actions[:, -1] = bundle.statistics.normalize_actions(ood_raw)
    ood = seqcore.TokenWindow(window.states, actions, window.steps, window.mask, window.last_state, ood_raw)
    _, std_out = predict_state(bundle, ood)
    return float(std_in.mean()), float(std_out.mean())


def save_bundle(bundle, path):
    """
    Writes ``bundle.json`` plus one weight file per snapshot (``state_<k>.bin``, ``reward_<q>.bin``).

    :param bundle: :py:class:`EnsembleBundle`
    :param path: directory path, created if missing
    :return: None
    """
    os.makedirs(path, exist_ok=True)
    state_model, reward_model = bundle.state_models[0], bundle.reward_models[0]
    meta = {
        "format_version": BUNDLE_VERSION,
        "K": bundle.K,
        "Q": bundle.Q,
        "state_config": state_model.config.to_dict(),
        "reward_config": reward_model.config.to_dict(),
        "state_layout": state_model.layout.manifest(),
        "reward_layout": reward_model.layout.manifest(),
        "statistics": bundle.statistics.to_dict(),
        "state_files": [f"state_{k}.bin" for k in range(bundle.K)],
        "reward_files": [f"reward_{q}.bin" for q in range(bundle.Q)],
    }
    with open(os.path.join(path, "bundle.json"), "w") as file:
        json.dump(meta, file, indent=2, sort_keys=True)
        file.write("\n")
    for name, model in zip(meta["state_files"] + meta["reward_files"], bundle.state_models + bundle.reward_models):
        seqcore.write_weights(model.params, os.path.join(path, name))
    bundle.history.to_csv(os.path.join(path, "history.csv"), index=False)


def load_bundle(path):
    """
    Reads a bundle directory written by :py:func:`save_bundle`.

    :param path: directory path
    :return: :py:class:`EnsembleBundle`
    """
    with open(os.path.join(path, "bundle.json")) as file:
        meta = json.load(file)
    if meta.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"Unsupported bundle version {meta.get('format_version')} in {path}.")
    models = {}
    for kind in ("state", "reward"):
        config = seqcore.SequenceModelConfig.from_dict(meta[f"{kind}_config"])
        n_params = seqcore.ParameterLayout.for_sequence_model(config).size
        models[kind] = [
            seqcore.SequenceModel(config, seqcore.read_weights(os.path.join(path, name), n_params))
            for name in meta[f"{kind}_files"]
        ]
    history_file = os.path.join(path, "history.csv")
    history = pd.read_csv(history_file) if os.path.exists(history_file) else None
    return EnsembleBundle(models["state"], models["reward"], datasets.Statistics.from_dict(meta["statistics"]), history)
