"""
Unit and regression test for the trajaug package.
"""

# Import package, test suite, and other packages as needed
import pytest
import numpy as np
from trajaug import utils


def test_derive_seed():
    assert utils.derive_seed(42) == utils.derive_seed(42)
    assert utils.derive_seed(42, 0) != utils.derive_seed(42, 1)
    assert utils.derive_seed(42, 1, 0) != utils.derive_seed(42, 0, 1)
    assert utils.derive_seed(0) != utils.derive_seed(1)
    assert 0 <= utils.derive_seed(7, 3) <= utils.MASK64


def test_splitmix_blocks_match_single_draws():
    a = utils.SplitMix64(123)
    b = utils.SplitMix64(123)
    block = a.next_uint64(10)
    single = np.concatenate([b.next_uint64(1) for _ in range(10)])
    np.testing.assert_array_equal(block, single)
    assert a.state == b.state


def test_splitmix_random():
    rng = utils.SplitMix64(5)
    x = rng.random(10000)
    assert x.min() >= 0.0
    assert x.max() < 1.0
    assert abs(x.mean() - 0.5) < 0.02
    assert isinstance(rng.random(), float)
    assert rng.random((3, 2)).shape == (3, 2)
    np.testing.assert_array_equal(utils.SplitMix64(9).random(5), utils.SplitMix64(9).random(5))


def test_splitmix_uniform_and_integers():
    rng = utils.SplitMix64(11)
    u = rng.uniform(-0.1, 0.1, 1000)
    assert np.all(np.abs(u) <= 0.1)
    k = rng.integers(3, 7, size=1000)
    assert k.min() >= 3 and k.max() <= 6
    assert set(np.unique(k)) == {3, 4, 5, 6}
    assert 0 <= rng.integers(4) < 4
    with pytest.raises(ValueError, match="Empty integer range"):
        rng.integers(2, 2)
    with pytest.raises(ValueError, match="non-negative"):
        rng.next_uint64(-1)


def test_numpy_generator():
    a = utils.numpy_generator(3, 1).normal(size=4)
    b = utils.numpy_generator(3, 1).normal(size=4)
    c = utils.numpy_generator(3, 2).normal(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_floor_std():
    np.testing.assert_array_equal(utils.floor_std([0.0, 0.5]), [utils.STD_FLOOR, 0.5])


def test_ensemble_moments():
    mean, std = utils.ensemble_moments([[1.0], [3.0]])
    assert mean[0] == pytest.approx(2.0)
    assert std[0] == pytest.approx(1.0)

    mean, std = utils.ensemble_moments([0.5, 0.9, 0.7, 0.7])
    assert mean == pytest.approx(0.7)
    assert std == pytest.approx(0.1414, abs=1e-4)

    mean, std = utils.ensemble_moments([[0.2, -0.4]])
    np.testing.assert_array_equal(std, [0.0, 0.0])

    # permutation invariance
    preds = np.random.default_rng(0).normal(size=(5, 3))
    m1, s1 = utils.ensemble_moments(preds)
    m2, s2 = utils.ensemble_moments(preds[::-1])
    np.testing.assert_allclose(m1, m2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-15)

    with pytest.raises(ValueError, match="empty ensemble"):
        utils.ensemble_moments(np.zeros((0, 2)))
