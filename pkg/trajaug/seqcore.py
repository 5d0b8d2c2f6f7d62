"""
seqcore.py
Causal sequence model over interleaved (state, action) tokens with hand-written reverse-mode
gradients, mean-squared-error loss and the Adam optimizer. All arithmetic is float64.
"""

import os
import json
import logging
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import utils

logger = logging.getLogger(__name__)

HEAD_KINDS = ("state", "reward")
ACTIVATIONS = ("relu", "gelu")
CHECKPOINT_VERSION = 1
_GELU_C = np.sqrt(2.0 / np.pi)


class NonFiniteError(FloatingPointError):
    """
    Raised when activations, losses or gradients stop being finite. ``layer`` names where it happened.
    """

    def __init__(self, layer, message=None):
        super().__init__(message or f"Non-finite values in {layer}.")
        self.layer = layer


@dataclass(frozen=True)
class SequenceModelConfig:
    """
    Hyperparameters of one sequence model. Defaults are the large-scale configuration.
    """

    state_dim: int
    action_dim: int
    head_kind: str = "state"
    embed_dim: int = 128
    n_layer: int = 10
    n_head: int = 4
    dropout: float = 0.1
    max_step: int = 1000
    context_len: int = 20
    activation: str = "relu"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"Unknown head kind {self.head_kind}. Head must be any of: state, reward.")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {self.activation}. Activation must be any of: relu, gelu.")
        if self.embed_dim % self.n_head != 0:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by n_head={self.n_head}.")
        if min(self.state_dim, self.action_dim, self.embed_dim, self.n_head, self.max_step, self.context_len) < 1:
            raise ValueError(f"Dimensions of {self} must be positive.")
        if self.n_layer < 0:
            raise ValueError(f"n_layer must be non-negative, got {self.n_layer}.")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"Dropout rate must lie in [0, 1), got {self.dropout}.")

    @property
    def output_dim(self):
        return self.state_dim if self.head_kind == "state" else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ParameterLayout:
    """
    Named layout of a flat parameter vector: an ordered list of (name, shape) entries.
    """

    def __init__(self, entries):
        self.entries = [(name, tuple(int(s) for s in shape)) for name, shape in entries]
        self.offsets = {}
        offset = 0
        for name, shape in self.entries:
            if name in self.offsets:
                raise ValueError(f"Duplicate parameter name {name}.")
            self.offsets[name] = offset
            offset += int(np.prod(shape, dtype=np.int64))
        self.size = offset

    @classmethod
    def for_sequence_model(cls, config):
        d, h = config.embed_dim, 4 * config.embed_dim
        entries = [
            ("embed_state.weight", (config.state_dim, d)),
            ("embed_state.bias", (d,)),
            ("embed_action.weight", (config.action_dim, d)),
            ("embed_action.bias", (d,)),
            ("embed_step", (config.max_step, d)),
        ]
        for layer in range(config.n_layer):
            p = f"blocks.{layer}."
            entries += [
                (p + "ln1.gain", (d,)),
                (p + "ln1.bias", (d,)),
                (p + "attn.qkv.weight", (d, 3 * d)),
                (p + "attn.qkv.bias", (3 * d,)),
                (p + "attn.proj.weight", (d, d)),
                (p + "attn.proj.bias", (d,)),
                (p + "ln2.gain", (d,)),
                (p + "ln2.bias", (d,)),
                (p + "mlp.fc.weight", (d, h)),
                (p + "mlp.fc.bias", (h,)),
                (p + "mlp.proj.weight", (h, d)),
                (p + "mlp.proj.bias", (d,)),
            ]
        entries += [
            ("ln_f.gain", (d,)),
            ("ln_f.bias", (d,)),
            ("head.weight", (d, config.output_dim)),
            ("head.bias", (config.output_dim,)),
        ]
        return cls(entries)

    def views(self, flat):
        """
        Reshaped views into ``flat``; writing to a view writes to the vector.

        :param flat: :py:class:`numpy.ndarray` of length ``size``
        :return: :py:class:`dict` name -> view
        """
        if flat.shape != (self.size,):
            raise ValueError(f"Parameter vector has shape {flat.shape}, layout needs ({self.size},).")
        result = {}
        for name, shape in self.entries:
            start = self.offsets[name]
            result[name] = flat[start : start + int(np.prod(shape, dtype=np.int64))].reshape(shape)
        return result

    def manifest(self):
        return [{"name": name, "shape": list(shape), "offset": self.offsets[name]} for name, shape in self.entries]

    def initialize(self, rng, init_std):
        """
        Gaussian(0, init_std) weights, zero biases, unit layer-norm gains.
        """
        flat = np.zeros(self.size)
        views = self.views(flat)
        for name, shape in self.entries:
            if name.endswith(".gain"):
                views[name][...] = 1.0
            elif not name.endswith(".bias"):
                views[name][...] = rng.normal(0.0, init_std, shape)
        return flat


class SequenceModel:
    """
    Store the configuration and flat parameter vector of one causal sequence model.
    """

    def __init__(self, config: SequenceModelConfig, params=None, seed: int = 0):
        """
        :param config: :py:class:`SequenceModelConfig`
        :param params: flat parameter vector; seeded initialization if omitted
        :param seed: integer seed for initialization
        :return: None
        """
        self.config = config
        self.layout = ParameterLayout.for_sequence_model(config)
        if params is None:
            params = self.layout.initialize(utils.numpy_generator(seed), config.init_std)
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.layout.size,):
            raise ValueError(f"Parameter vector has {params.size} entries, layout needs {self.layout.size}.")
        self.params = params

    @property
    def n_params(self):
        return self.layout.size

    def get_parameters(self):
        return self.layout.views(self.params)

    def copy(self):
        return SequenceModel(self.config, self.params.copy())

    def __eq__(self, other):
        if not isinstance(other, SequenceModel):
            return False
        return self.config == other.config and np.array_equal(self.params, other.params)

    def __ne__(self, other):
        return not self.__eq__(other)


@dataclass
class TokenWindow:
    """
    Interleaved token window ``s_{t-L+1}, a_{t-L+1}, ..., s_t, a_t`` in normalized units, left-padded
    with zero tokens. Arrays may carry a leading batch axis.

    ``last_state``/``last_action`` hold the raw (un-normalized) final state and action.
    """

    states: np.ndarray
    actions: np.ndarray
    steps: np.ndarray
    mask: np.ndarray
    last_state: np.ndarray = None
    last_action: np.ndarray = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        lead = self.mask.shape
        if self.states.shape[:-1] != lead or self.actions.shape[:-1] != lead or self.steps.shape != lead:
            raise ValueError(
                f"Window arrays disagree: states {self.states.shape}, actions {self.actions.shape}, "
                f"steps {self.steps.shape}, mask {self.mask.shape}."
            )

    @property
    def batched(self):
        return self.mask.ndim == 2

    @property
    def n_steps(self):
        return self.mask.shape[-1]


def build_window(states, actions, steps, statistics, context_len):
    """
    Builds a :py:class:`TokenWindow` from the most recent ``context_len`` raw (state, action) pairs.

    :param states: array (n, state_dim), raw units
    :param actions: array (n, action_dim), raw units
    :param steps: integer step indices (n,)
    :param statistics: :py:class:`trajaug.datasets.Statistics` used for normalization
    :param context_len: window length L
    :return: :py:class:`TokenWindow`
    """
    states = np.array(states, dtype=np.float64, ndmin=2)[-context_len:]
    actions = np.array(actions, dtype=np.float64, ndmin=2)[-context_len:]
    steps = np.asarray(steps, dtype=np.int64).reshape(-1)[-context_len:]
    n = len(states)
    if n == 0 or len(actions) != n or len(steps) != n:
        raise ValueError(f"Window needs matching non-empty states, actions and steps, got {n}, {len(actions)}, {len(steps)}.")
    pad = context_len - n
    s = np.zeros((context_len, states.shape[1]))
    a = np.zeros((context_len, actions.shape[1]))
    t = np.zeros(context_len, dtype=np.int64)
    m = np.zeros(context_len)
    s[pad:] = statistics.normalize_states(states)
    a[pad:] = statistics.normalize_actions(actions)
    t[pad:] = steps
    m[pad:] = 1.0
    return TokenWindow(s, a, t, m, last_state=states[-1].copy(), last_action=actions[-1].copy())


def stack_windows(windows):
    """
    Stacks single windows of equal length into one batched window.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("Cannot stack an empty list of windows.")
    return TokenWindow(
        np.stack([w.states for w in windows]),
        np.stack([w.actions for w in windows]),
        np.stack([w.steps for w in windows]),
        np.stack([w.mask for w in windows]),
        last_state=np.stack([w.last_state for w in windows]) if windows[0].last_state is not None else None,
        last_action=np.stack([w.last_action for w in windows]) if windows[0].last_action is not None else None,
    )


@dataclass
class TrainingBatch:
    """
    Batched window with per-action-position targets (B, L, output_dim) and a target mask (B, L).
    """

    window: TokenWindow
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not self.window.batched:
            raise ValueError("TrainingBatch needs a batched window.")
        if self.targets.shape[:2] != self.mask.shape or self.mask.shape != self.window.mask.shape:
            raise ValueError(f"Targets {self.targets.shape} and mask {self.mask.shape} do not match the window.")

    def __len__(self):
        return self.mask.shape[0]


def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(layer)


def _layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, cache, gain, dgain, dbias):
    xhat, inv = cache
    dgain[...] = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias[...] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _activation(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _activation_grad(x, kind):
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    th = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)


def _dropout_mask(rng, shape, rate, train):
    if not train or rate == 0.0:
        return None
    if rng is None:
        raise ValueError("Training-mode forward pass with dropout needs a random generator.")
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _matmul_grad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _forward(model, window, train=False, rng=None):
    cfg = model.config
    p = model.get_parameters()
    S, A, T, M = window.states, window.actions, window.steps, window.mask
    if not window.batched:
        S, A, T, M = S[None], A[None], T[None], M[None]
    B, L = M.shape
    if L > cfg.context_len:
        raise ValueError(f"Window holds {L} steps ({2 * L} tokens), model context is {cfg.context_len} steps.")
    if S.shape[-1] != cfg.state_dim or A.shape[-1] != cfg.action_dim:
        raise ValueError(f"Window dimensions {S.shape[-1]}/{A.shape[-1]} do not match model {cfg.state_dim}/{cfg.action_dim}.")
    if T.min() < 0 or T.max() >= cfg.max_step:
        raise ValueError(f"Step indices must lie in [0, {cfg.max_step}), got [{T.min()}, {T.max()}].")

    D, H = cfg.embed_dim, cfg.n_head
    dh = D // H
    N = 2 * L
    scale = 1.0 / np.sqrt(dh)

    step_emb = p["embed_step"][T]
    X = np.empty((B, N, D))
    X[:, 0::2] = S @ p["embed_state.weight"] + p["embed_state.bias"] + step_emb
    X[:, 1::2] = A @ p["embed_action.weight"] + p["embed_action.bias"] + step_emb
    token_mask = np.repeat(M, 2, axis=1)
    X = X * token_mask[..., None]
    drop_embed = _dropout_mask(rng, X.shape, cfg.dropout, train)
    if drop_embed is not None:
        X = X * drop_embed
    _check_finite(X, "embedding")

    # position i attends to valid positions j <= i, and always to itself
    causal = np.tril(np.ones((N, N), dtype=bool))
    allowed = causal[None] & ((token_mask[:, None, :] > 0) | np.eye(N, dtype=bool)[None])
    allowed = allowed[:, None]

    layers = []
    for layer in range(cfg.n_layer):
        pre = f"blocks.{layer}."
        a_in, ln1 = _layer_norm(X, p[pre + "ln1.gain"], p[pre + "ln1.bias"], cfg.ln_eps)
        qkv = a_in @ p[pre + "attn.qkv.weight"] + p[pre + "attn.qkv.bias"]
        q, k, v = (qkv[..., i * D : (i + 1) * D].reshape(B, N, H, dh).transpose(0, 2, 1, 3) for i in range(3))
        att = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        att = np.exp(att - att.max(axis=-1, keepdims=True))
        P = att / att.sum(axis=-1, keepdims=True)
        ctx = (P @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        o = ctx @ p[pre + "attn.proj.weight"] + p[pre + "attn.proj.bias"]
        drop_attn = _dropout_mask(rng, o.shape, cfg.dropout, train)
        if drop_attn is not None:
            o = o * drop_attn
        X = X + o
        _check_finite(X, pre + "attn")

        m_in, ln2 = _layer_norm(X, p[pre + "ln2.gain"], p[pre + "ln2.bias"], cfg.ln_eps)
        hidden = m_in @ p[pre + "mlp.fc.weight"] + p[pre + "mlp.fc.bias"]
        act = _activation(hidden, cfg.activation)
        out = act @ p[pre + "mlp.proj.weight"] + p[pre + "mlp.proj.bias"]
        drop_mlp = _dropout_mask(rng, out.shape, cfg.dropout, train)
        if drop_mlp is not None:
            out = out * drop_mlp
        X = X + out
        _check_finite(X, pre + "mlp")
        layers.append((a_in, ln1, q, k, v, P, ctx, drop_attn, m_in, ln2, hidden, act, drop_mlp))

    Z, ln_f = _layer_norm(X, p["ln_f.gain"], p["ln_f.bias"], cfg.ln_eps)
    Z_action = Z[:, 1::2]
    Y = Z_action @ p["head.weight"] + p["head.bias"]
    _check_finite(Y, "head")
    cache = (S, A, T, token_mask, drop_embed, layers, ln_f, Z_action)
    return Y, cache


def _backward(model, cache, dY):
    cfg = model.config
    p = model.get_parameters()
    grad = np.zeros(model.n_params)
    g = model.layout.views(grad)
    S, A, T, token_mask, drop_embed, layers, ln_f, Z_action = cache
    B, L = T.shape
    D, H = cfg.embed_dim, cfg.n_head
    dh = D // H
    N = 2 * L
    scale = 1.0 / np.sqrt(dh)

    g["head.weight"][...] = _matmul_grad(Z_action, dY)
    g["head.bias"][...] = dY.reshape(-1, dY.shape[-1]).sum(axis=0)
    dZ = np.zeros((B, N, D))
    dZ[:, 1::2] = dY @ p["head.weight"].T
    dX = _layer_norm_backward(dZ, ln_f, p["ln_f.gain"], g["ln_f.gain"], g["ln_f.bias"])

    for layer in reversed(range(cfg.n_layer)):
        pre = f"blocks.{layer}."
        a_in, ln1, q, k, v, P, ctx, drop_attn, m_in, ln2, hidden, act, drop_mlp = layers[layer]

        dout = dX if drop_mlp is None else dX * drop_mlp
        g[pre + "mlp.proj.weight"][...] = _matmul_grad(act, dout)
        g[pre + "mlp.proj.bias"][...] = dout.reshape(-1, D).sum(axis=0)
        dhidden = (dout @ p[pre + "mlp.proj.weight"].T) * _activation_grad(hidden, cfg.activation)
        g[pre + "mlp.fc.weight"][...] = _matmul_grad(m_in, dhidden)
        g[pre + "mlp.fc.bias"][...] = dhidden.reshape(-1, dhidden.shape[-1]).sum(axis=0)
        dm_in = dhidden @ p[pre + "mlp.fc.weight"].T
        dX = dX + _layer_norm_backward(dm_in, ln2, p[pre + "ln2.gain"], g[pre + "ln2.gain"], g[pre + "ln2.bias"])

        do = dX if drop_attn is None else dX * drop_attn
        g[pre + "attn.proj.weight"][...] = _matmul_grad(ctx, do)
        g[pre + "attn.proj.bias"][...] = do.reshape(-1, D).sum(axis=0)
        dctx = (do @ p[pre + "attn.proj.weight"].T).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        dP = dctx @ v.transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ dctx
        datt = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dq = datt @ k
        dk = datt.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([x.transpose(0, 2, 1, 3).reshape(B, N, D) for x in (dq, dk, dv)], axis=-1)
        g[pre + "attn.qkv.weight"][...] = _matmul_grad(a_in, dqkv)
        g[pre + "attn.qkv.bias"][...] = dqkv.reshape(-1, 3 * D).sum(axis=0)
        da_in = dqkv @ p[pre + "attn.qkv.weight"].T
        dX = dX + _layer_norm_backward(da_in, ln1, p[pre + "ln1.gain"], g[pre + "ln1.gain"], g[pre + "ln1.bias"])

    if drop_embed is not None:
        dX = dX * drop_embed
    dX = dX * token_mask[..., None]
    dxs = dX[:, 0::2]
    dxa = dX[:, 1::2]
    g["embed_state.weight"][...] = _matmul_grad(S, dxs)
    g["embed_state.bias"][...] = dxs.reshape(-1, D).sum(axis=0)
    g["embed_action.weight"][...] = _matmul_grad(A, dxa)
    g["embed_action.bias"][...] = dxa.reshape(-1, D).sum(axis=0)
    np.add.at(g["embed_step"], T.reshape(-1), (dxs + dxa).reshape(-1, D))
    _check_finite(grad, "gradients")
    return grad


def forward(model, window, train=False, rng=None):
    """
    Predictions at every action-token position. For ``head_kind="state"`` each prediction is a
    normalized state delta, for ``head_kind="reward"`` a standardized reward.

    :param model: :py:class:`SequenceModel`
    :param window: :py:class:`TokenWindow`, single or batched
    :param train: enables dropout
    :param rng: :py:class:`numpy.random.Generator` for dropout masks
    :return: :py:class:`numpy.ndarray` of shape (L, output_dim) or (B, L, output_dim)
    """
    Y, _ = _forward(model, window, train=train, rng=rng)
    return Y if window.batched else Y[0]


def loss_mse(pred, target, mask):
    """
    Mean of squared componentwise errors over unmasked positions.

    :param pred: array (..., L) or (..., L, k)
    :param target: array of the same shape
    :param mask: array (..., L) with 1 for positions that count
    :return: float
    """
    return _loss_and_grad(pred, target, mask)[0]


def _loss_and_grad(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"Prediction shape {pred.shape} does not match target shape {target.shape}.")
    diff = pred - target
    scalar = diff.ndim == mask.ndim
    if scalar:
        diff = diff[..., None]
    if diff.shape[:-1] != mask.shape:
        raise ValueError(f"Mask shape {mask.shape} does not match predictions {pred.shape}.")
    count = mask.sum()
    if count <= 0:
        raise ValueError("Loss needs at least one unmasked position.")
    denom = count * diff.shape[-1]
    weighted = mask[..., None] * diff
    loss = float((weighted * diff).sum() / denom)
    dpred = 2.0 * weighted / denom
    return loss, (dpred[..., 0] if scalar else dpred)


def loss_and_gradients(model, batch, train=False, rng=None):
    """
    Mean batch loss and its exact gradient with respect to every parameter.

    :param model: :py:class:`SequenceModel`
    :param batch: :py:class:`TrainingBatch`
    :param train: enables dropout
    :param rng: :py:class:`numpy.random.Generator` for dropout masks
    :return: tuple (loss, flat gradient)
    """
    if len(batch) == 0:
        raise ValueError("Gradient needs a non-empty batch.")
    Y, cache = _forward(model, batch.window, train=train, rng=rng)
    loss, dY = _loss_and_grad(Y, batch.targets, batch.mask)
    return loss, _backward(model, cache, dY)


def gradients(model, batch):
    """
    Gradient of the mean batch loss in evaluation mode (dropout disabled).

    :param model: :py:class:`SequenceModel`
    :param batch: :py:class:`TrainingBatch`
    :return: flat gradient
    """
    return loss_and_gradients(model, batch)[1]


def batch_loss(model, batch):
    Y, _ = _forward(model, batch.window)
    return _loss_and_grad(Y, batch.targets, batch.mask)[0]


class GradientCheck:
    """
    Result of comparing analytic gradients against central finite differences.
    """

    def __init__(self, analytic, numeric, floor):
        self.analytic = analytic
        self.numeric = numeric
        self.relative_error = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)

    @property
    def max_relative_error(self):
        return float(self.relative_error.max()) if self.relative_error.size else 0.0


def check_gradients(model, batch, delta=1e-5, floor=1e-4, indices=None):
    """
    Compares :py:func:`gradients` with central differences ``(L(p + delta) - L(p - delta)) / (2 delta)``.

    :param model: :py:class:`SequenceModel`
    :param batch: :py:class:`TrainingBatch`
    :param delta: finite-difference step
    :param floor: lower bound of the relative-error denominator
    :param indices: parameter indices to check, all if omitted
    :return: :py:class:`GradientCheck`
    """
    analytic = gradients(model, batch)
    indices = np.arange(model.n_params) if indices is None else np.asarray(indices)
    probe = model.copy()
    numeric = np.empty(len(indices))
    for n, i in enumerate(indices):
        original = probe.params[i]
        probe.params[i] = original + delta
        plus = batch_loss(probe, batch)
        probe.params[i] = original - delta
        minus = batch_loss(probe, batch)
        probe.params[i] = original
        numeric[n] = (plus - minus) / (2.0 * delta)
    return GradientCheck(analytic[indices], numeric, floor)


@dataclass(frozen=True)
class OptimizerState:
    """
    Adam moments, step counter and hyperparameters. ``grad_clip=None`` disables clipping.
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 0.25

    @classmethod
    def create(cls, n_params, **kwargs):
        return cls(np.zeros(n_params), np.zeros(n_params), **kwargs)


def clip_gradients(grads, max_norm):
    """
    Rescales ``grads`` so its global L2 norm does not exceed ``max_norm``.

    :param grads: flat gradient
    :param max_norm: norm bound, None to disable
    :return: clipped copy
    """
    grads = np.asarray(grads, dtype=np.float64)
    if max_norm is None:
        return grads.copy()
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm <= max_norm:
        return grads.copy()
    return grads * (max_norm / norm)


def optimizer_step(params, grads, state, lr):
    """
    Global-norm gradient clipping followed by Adam with decoupled weight decay.

    :param params: flat parameters
    :param grads: flat gradient
    :param state: :py:class:`OptimizerState`
    :param lr: learning rate
    :return: tuple (new params, new :py:class:`OptimizerState`)
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"Shapes disagree: params {params.shape}, grads {grads.shape}, moments {state.m.shape}.")
    _check_finite(grads, "gradients")
    g = clip_gradients(grads, state.grad_clip)
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


def save_model(model, path):
    """
    Writes ``model.json`` (config and layout manifest) and ``weights.bin`` (little-endian float64 in
    manifest order).

    :param model: :py:class:`SequenceModel`
    :param path: directory path, created if missing
    :return: None
    """
    os.makedirs(path, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "n_params": model.n_params,
        "layout": model.layout.manifest(),
    }
    with open(os.path.join(path, "model.json"), "w") as file:
        json.dump(meta, file, indent=2, sort_keys=True)
        file.write("\n")
    write_weights(model.params, os.path.join(path, "weights.bin"))


def load_model(path):
    """
    Reads a checkpoint written by :py:func:`save_model`.

    :param path: directory path
    :return: :py:class:`SequenceModel`
    """
    with open(os.path.join(path, "model.json")) as file:
        meta = json.load(file)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {meta.get('format_version')} in {path}.")
    config = SequenceModelConfig.from_dict(meta["config"])
    return SequenceModel(config, read_weights(os.path.join(path, "weights.bin"), meta["n_params"]))


def write_weights(params, filename):
    with open(filename, "wb") as file:
        file.write(np.asarray(params, dtype="<f8").tobytes())


def read_weights(filename, n_params):
    with open(filename, "rb") as file:
        raw = file.read()
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if values.size != int(n_params):
        raise ValueError(f"{filename} holds {values.size} weights, expected {n_params}.")
    return values
