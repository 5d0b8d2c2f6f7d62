"""
Unit and regression test for the trajaug package.
"""

# Import package, test suite, and other packages as needed
import math

import pytest
import numpy as np

from trajaug import datasets, environments, evaluator, generate, utils


class EnvBundle:
    """Query interface of an ensemble bundle answered by the true dynamics, with zero spread."""

    def __init__(self, env, statistics, context_len=3):
        self.env = env
        self.statistics = statistics
        self.context_len = context_len
        self.calls = 0

    def predict_state(self, window):
        self.calls += 1
        next_states, _, _ = environments.step_env(self.env, window.last_state, window.last_action)
        return next_states, np.zeros_like(next_states)

    def predict_reward(self, window):
        _, rewards, _ = environments.step_env(self.env, window.last_state, window.last_action)
        return rewards, np.zeros_like(rewards)

    def single(self):
        return self


@pytest.fixture(scope="module")
def env():
    return environments.get_env("LineReach")


@pytest.fixture(scope="module")
def medium(env):
    return datasets.collect_dataset(env, "medium", 20, seed=5)


@pytest.fixture
def bundle(env, medium):
    return EnvBundle(env, medium.statistics)


def _segment(traj_id, start, cumulative_reward, h=2):
    return generate.Segment(
        traj_id,
        start,
        start,
        np.zeros((h, 2)),
        np.zeros((h, 1)),
        np.full(h, cumulative_reward / h),
        np.zeros(h, dtype=bool),
        float(cumulative_reward),
    )


def _trajectory(length, reward=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return datasets.Trajectory(rng.normal(size=(length, 2)), rng.uniform(-1, 1, (length, 1)), np.full(length, reward))


def test_generation_config():
    cfg = generate.GenerationConfig(strategy="top_n", horizon=10)
    assert generate.GenerationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="Unknown strategy"):
        generate.GenerationConfig(strategy="greedy")
    with pytest.raises(ValueError, match="at least 2"):
        generate.GenerationConfig(horizon=1)
    with pytest.raises(ValueError, match="non-negative"):
        generate.GenerationConfig(noise=-0.1)
    with pytest.raises(ValueError, match="ratio"):
        generate.GenerationConfig(ratio=0.0)
    with pytest.raises(ValueError, match="temperature"):
        generate.GenerationConfig(temperature=0.0)


def test_perturb_action():
    a = np.array([0.3, -0.2])
    np.testing.assert_array_equal(generate.perturb_action(a, 0.0, utils.SplitMix64(0)), a)

    rng = utils.SplitMix64(1)
    for _ in range(1000):
        out = generate.perturb_action([0.95], 0.1, rng)
        assert -1.0 <= out[0] <= 1.0
        assert abs(out[0] - 0.95) <= 0.1 + 1e-15

    first = generate.perturb_action(a, 0.1, utils.SplitMix64(7))
    second = generate.perturb_action(a, 0.1, utils.SplitMix64(7))
    np.testing.assert_array_equal(first, second)

    with pytest.raises(ValueError, match="non-negative"):
        generate.perturb_action(a, -0.1, utils.SplitMix64(0))


def test_split_segments(env):
    d = datasets.OfflineDataset([_trajectory(50), _trajectory(55, seed=1)], env.env_id)
    segments = generate.split_segments(d, 10)
    assert len(segments) == 10
    assert [s.start for s in segments if s.traj_id == 1] == [0, 10, 20, 30, 40]
    for seg in segments:
        assert seg.length == 10
        assert seg.cumulative_reward == pytest.approx(1.0)
    np.testing.assert_array_equal(segments[6].states, d[1].states[10:20])
    with pytest.raises(ValueError, match="at least 2"):
        generate.split_segments(d, 1)


def test_select_top_n():
    segments = [_segment(i, 0, r) for i, r in enumerate([5.0, 3.0, 9.0, 1.0])]
    cfg = generate.GenerationConfig(strategy="top_n", horizon=2)
    chosen = generate.select_segments(segments, cfg, 2, utils.SplitMix64(0))
    assert [s.cumulative_reward for s in chosen] == [9.0, 5.0]


def test_select_top_n_ties():
    rng = np.random.default_rng(3)
    returns = rng.integers(0, 5, size=30).astype(float)
    segments = [_segment(i // 3, 2 * (i % 3), r) for i, r in enumerate(returns)]
    rng.shuffle(segments)
    cfg = generate.GenerationConfig(strategy="top_n", horizon=2)
    for n in (1, 7, 30):
        chosen = generate.select_segments(segments, cfg, n, utils.SplitMix64(0))
        expected = sorted(segments, key=lambda s: (-s.cumulative_reward, s.traj_id, s.start))[:n]
        assert [(s.traj_id, s.start) for s in chosen] == [(s.traj_id, s.start) for s in expected]


@pytest.mark.parametrize("n_sets, max_segments", [(50, 200), pytest.param(1000, 10000, marks=pytest.mark.slow)])
def test_select_top_n_matches_sorting(n_sets, max_segments):
    rng = np.random.default_rng(8)
    cfg = generate.GenerationConfig(strategy="top_n", horizon=2)
    for _ in range(n_sets):
        m = int(rng.integers(1, max_segments + 1))
        returns = np.round(rng.normal(size=m), 1)
        segments = [_segment(i // 5, 2 * (i % 5), r) for i, r in enumerate(returns)]
        segments = [segments[i] for i in rng.permutation(m)]
        n = int(rng.integers(1, m + 1))
        chosen = generate.select_segments(segments, cfg, n, utils.SplitMix64(0))
        expected = sorted(segments, key=lambda s: (-s.cumulative_reward, s.traj_id, s.start))[:n]
        assert [(s.traj_id, s.start) for s in chosen] == [(s.traj_id, s.start) for s in expected]


def test_selection_probabilities():
    cfg = generate.GenerationConfig(horizon=2, normalize_returns=False)
    equal = [_segment(i, 0, 2.0) for i in range(3)]
    np.testing.assert_allclose(generate.selection_probabilities(equal, cfg), [1 / 3] * 3)

    pair = [_segment(0, 0, 1.0), _segment(1, 0, 0.0)]
    p = generate.selection_probabilities(pair, cfg)
    assert p[0] == pytest.approx(math.e / (math.e + 1))

    # z-scored returns ignore a common shift and scale
    normalized = generate.GenerationConfig(horizon=2)
    shifted = [_segment(0, 0, 101.0), _segment(1, 0, 100.0)]
    scaled = [_segment(0, 0, 10.0), _segment(1, 0, 0.0)]
    np.testing.assert_allclose(
        generate.selection_probabilities(shifted, normalized), generate.selection_probabilities(scaled, normalized)
    )
    with pytest.raises(ValueError, match="No segments"):
        generate.selection_probabilities([], cfg)


def _first_draw_frequencies(segments, cfg, draws, seed):
    rng = utils.SplitMix64(seed)
    counts = np.zeros(len(segments))
    for _ in range(draws):
        counts[generate.select_segments(segments, cfg, 1, rng)[0].traj_id] += 1
    return counts / draws


@pytest.mark.parametrize("draws", [10000, pytest.param(100000, marks=pytest.mark.slow)])
@pytest.mark.parametrize("normalize", [False, True])
def test_select_softmax_frequencies(draws, normalize):
    cfg = generate.GenerationConfig(horizon=2, normalize_returns=normalize)
    segments = [_segment(i, 0, r) for i, r in enumerate([1.0, 0.0, 2.5, -1.0])]
    returns = np.array([1.0, 0.0, 2.5, -1.0])
    if normalize:
        returns = (returns - returns.mean()) / returns.std()
    exact = np.exp(returns) / np.exp(returns).sum()
    np.testing.assert_allclose(generate.selection_probabilities(segments, cfg), exact, rtol=1e-12)

    observed = _first_draw_frequencies(segments, cfg, draws, seed=11)
    sigma = np.sqrt(exact * (1 - exact) / draws)
    assert np.all(np.abs(observed - exact) <= 3 * sigma)


@pytest.mark.parametrize(
    "returns, temperature, normalize, n, expected",
    [
        ([0.0, 1.0, 2.0, 3.0, 4.0], 1e-3, True, 3, [4, 3, 2]),
        ([0.0, -10.0, -20.0], 1e-2, False, 2, [0, 1]),
        ([0.0, -10.0, -20.0], 1e-3, False, 3, [0, 1, 2]),
        ([5.0, 5.0, 1.0], 1e-4, True, 3, None),
    ],
)
def test_select_softmax_low_temperature(returns, temperature, normalize, n, expected):
    cfg = generate.GenerationConfig(horizon=2, temperature=temperature, normalize_returns=normalize)
    segments = [_segment(i, 0, r) for i, r in enumerate(returns)]
    chosen = [s.traj_id for s in generate.select_segments(segments, cfg, n, utils.SplitMix64(1))]
    if expected is None:
        assert sorted(chosen[:2]) == [0, 1]
        assert chosen[2] == 2
    else:
        assert chosen == expected


def test_select_softmax_without_replacement():
    cfg = generate.GenerationConfig(horizon=2)
    segments = [_segment(i, 0, float(i)) for i in range(6)]
    chosen = generate.select_segments(segments, cfg, 6, utils.SplitMix64(2))
    assert sorted(s.traj_id for s in chosen) == list(range(6))
    with pytest.raises(ValueError, match="only 6 are available"):
        generate.select_segments(segments, cfg, 7, utils.SplitMix64(2))
    with pytest.raises(ValueError, match="positive"):
        generate.select_segments(segments, cfg, 0, utils.SplitMix64(2))


def test_select_random(medium):
    cfg = generate.GenerationConfig(strategy="random", horizon=10)
    chosen = generate.select_segments([], cfg, 40, utils.SplitMix64(4), dataset=medium)
    assert len(chosen) == 40
    assert len({(s.traj_id, s.start) for s in chosen}) == 40
    for seg in chosen:
        assert 0 <= seg.start <= len(medium[seg.traj_id]) - 10
        np.testing.assert_array_equal(seg.actions, medium[seg.traj_id].actions[seg.start : seg.start + 10])
    with pytest.raises(ValueError, match="not given"):
        generate.select_segments([], cfg, 1, utils.SplitMix64(4))


def test_select_random_caps(env):
    d = datasets.OfflineDataset([_trajectory(50)], env.env_id)
    cfg = generate.GenerationConfig(strategy="random", horizon=10)
    with pytest.warns(UserWarning, match="41 distinct"):
        chosen = generate.select_segments([], cfg, 50, utils.SplitMix64(0), dataset=d)
    assert sorted(s.start for s in chosen) == list(range(41))


def test_n_segments(medium):
    assert generate.n_segments(medium, generate.GenerationConfig(horizon=10, ratio=0.1)) == 10
    assert generate.n_segments(medium, generate.GenerationConfig(horizon=50, ratio=0.05)) == 1
    assert generate.n_segments(medium, generate.GenerationConfig(horizon=50, ratio=0.3)) == 6
    assert generate.n_segments(medium, generate.GenerationConfig(horizon=50, ratio=0.01)) == 0


def test_history_prefix(medium):
    traj = medium[0]
    states, actions, steps = generate.history_prefix(traj, 5, 4)
    np.testing.assert_array_equal(states, traj.states[2:5])
    np.testing.assert_array_equal(actions, traj.actions[2:5])
    np.testing.assert_array_equal(steps, [2, 3, 4])
    states, _, steps = generate.history_prefix(traj, 0, 4)
    assert states.shape == (0, 2)
    assert steps.dtype == np.int64 and len(steps) == 0


def test_rollout_matches_true_dynamics(env, medium, bundle):
    cfg = generate.GenerationConfig(horizon=10, noise=0.0)
    seg = generate.split_segments(medium, 10)[7]
    history = generate.history_prefix(medium[seg.traj_id], seg.start, bundle.context_len)
    rollout = generate.rollout_segment(seg, bundle, history, cfg, utils.SplitMix64(0))
    assert rollout.length == 10
    assert rollout.states.shape == (10, 2)
    np.testing.assert_array_equal(rollout.actions, seg.actions)
    np.testing.assert_array_equal(rollout.states[0], seg.states[0])
    np.testing.assert_allclose(rollout.states[1:], medium[seg.traj_id].states[seg.start + 1 : seg.start + 10], atol=1e-12)
    np.testing.assert_allclose(rollout.rewards, seg.rewards, atol=1e-12)
    np.testing.assert_array_equal(rollout.state_std, 0.0)
    assert bundle.calls == 10

    state_err, reward_err = generate.rollout_errors([rollout], env)
    np.testing.assert_allclose(state_err, 0.0, atol=1e-12)
    np.testing.assert_allclose(reward_err, 0.0, atol=1e-12)


def test_rollout_batch_matches_single(medium, bundle):
    cfg = generate.GenerationConfig(horizon=10, noise=0.2)
    segments = generate.split_segments(medium, 10)[:3]
    histories = [generate.history_prefix(medium[s.traj_id], s.start, bundle.context_len) for s in segments]
    batch = generate.rollout_segments(segments, bundle, histories, cfg, [utils.SplitMix64(k) for k in range(3)])
    alone = generate.rollout_segment(segments[2], bundle, histories[2], cfg, utils.SplitMix64(2))
    np.testing.assert_array_equal(batch[2].actions, alone.actions)
    np.testing.assert_array_equal(batch[2].states, alone.states)
    assert not np.array_equal(batch[0].actions, segments[0].actions)


def test_rollout_invalid(medium, bundle):
    cfg = generate.GenerationConfig(horizon=10)
    seg = generate.split_segments(medium, 5)[0]
    history = generate.history_prefix(medium[0], 0, bundle.context_len)
    with pytest.raises(ValueError, match="differs from the generation horizon"):
        generate.rollout_segment(seg, bundle, history, cfg, utils.SplitMix64(0))
    assert generate.rollout_segments([], bundle, [], cfg, []) == []


def test_generate_trajectories_deterministic(medium, bundle):
    cfg = generate.GenerationConfig(horizon=10, ratio=0.1, seed=3)
    first = generate.generate_trajectories(medium, bundle, cfg)
    second = generate.generate_trajectories(medium, bundle, cfg)
    assert len(first) == 10
    for a, b in zip(first, second):
        assert (a.traj_id, a.start) == (b.traj_id, b.start)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
    other = generate.generate_trajectories(medium, bundle, generate.GenerationConfig(horizon=10, ratio=0.1, seed=4))
    assert any(not np.array_equal(a.actions, b.actions) for a, b in zip(first, other))


@pytest.mark.parametrize("strategy", generate.STRATEGIES)
def test_generate_augmentation(medium, bundle, strategy):
    cfg = generate.GenerationConfig(strategy=strategy, horizon=10, ratio=0.1, seed=1)
    aug = generate.generate_augmentation(medium, bundle, cfg)
    assert len(aug) == 10
    assert aug.source == "generated"
    assert aug.statistics == medium.statistics
    assert datasets.augmentation_ratio(medium, aug) == pytest.approx(0.1)
    for traj in aug:
        assert len(traj) == 10
        assert traj.source == "generated"
        assert not traj.terminals.any()

    # zero spread gives uniform factors 1 - 1/h
    raw = generate.generate_trajectories(medium, bundle, cfg)
    np.testing.assert_allclose(aug[0].rewards, 0.9 * raw[0].rewards, atol=1e-12)
    passthrough = generate.generate_augmentation(medium, bundle, cfg, evaluator.EvaluatorConfig(enabled=False))
    np.testing.assert_array_equal(passthrough[0].rewards, raw[0].rewards)


def test_generate_nothing(medium, bundle):
    cfg = generate.GenerationConfig(horizon=50, ratio=0.01)
    with pytest.warns(UserWarning, match="yields no trajectory"):
        assert generate.generate_trajectories(medium, bundle, cfg) == []


def test_prediction_error_profile(medium, bundle):
    cfg = generate.GenerationConfig(strategy="random", horizon=10, noise=0.1)
    profile = generate.prediction_error_profile(medium, bundle, cfg, n_rollouts=5)
    assert profile.index.name == "step"
    assert len(profile) == 10
    assert list(profile.columns) == ["ensemble_state_l1", "ensemble_reward_l1", "single_state_l1", "single_reward_l1"]
    np.testing.assert_allclose(profile.to_numpy(), 0.0, atol=1e-12)
