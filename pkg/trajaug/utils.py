"""
utils.py
Contains utility functions: seeded random streams and small numerical helpers.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

STD_FLOOR = 1e-6


def mix64(z):
    """
    SplitMix64 finalizer on a python integer.

    :param z: integer, taken modulo 2**64
    :return: integer in [0, 2**64)
    """
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z):
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed, *keys):
    """
    Derives an independent stream seed from a base seed and a sequence of integer keys,
    e.g. ``derive_seed(seed, trajectory_index)``.

    :param seed: integer base seed
    :param keys: integers identifying the stream
    :return: integer seed in [0, 2**64)
    """
    h = mix64(int(seed) & MASK64)
    for key in keys:
        h = mix64((h + GOLDEN_GAMMA * (int(key) + 1)) & MASK64)
    return h


class SplitMix64:
    """
    SplitMix64 random stream. Output ``i`` of a stream with state ``x`` is
    ``mix64(x + (i + 1) * GOLDEN_GAMMA)``, so draws are identical whether they are
    requested one at a time or in blocks.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & MASK64

    @property
    def state(self):
        return self._state

    def next_uint64(self, n):
        """
        Draws ``n`` raw 64-bit outputs.

        :param n: number of draws
        :return: :py:class:`numpy.ndarray` of dtype uint64
        """
        n = int(n)
        if n < 0:
            raise ValueError(f"Number of draws must be non-negative, got {n}.")
        offsets = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        out = _mix64_array(np.uint64(self._state) + offsets)
        self._state = (self._state + GOLDEN_GAMMA * n) & MASK64
        return out

    def random(self, size=None):
        """
        Uniform doubles in [0, 1) built from the top 53 bits of each output.

        :param size: None for a python float, otherwise an int or shape tuple
        :return: float or :py:class:`numpy.ndarray`
        """
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        values = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        if size is None:
            return float(values[0])
        return values.reshape(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def integers(self, low, high=None, size=None):
        """
        Integers in [low, high), numpy-style (``integers(n)`` draws from [0, n)).
        """
        if high is None:
            low, high = 0, low
        if high <= low:
            raise ValueError(f"Empty integer range [{low}, {high}).")
        u = self.random(size)
        values = np.floor(u * (high - low)).astype(np.int64) + low
        if size is None:
            return int(values)
        return values


def numpy_generator(seed, *keys):
    """
    Numpy generator keyed the same way as :py:func:`derive_seed`; used for bulk draws
    (initialization, minibatch sampling, dropout) where a cross-language stream is not needed.
    """
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))


def floor_std(std, floor=STD_FLOOR):
    """
    Clamps standard deviations from below.

    :param std: array of standard deviations
    :param floor: minimum value
    :return: :py:class:`numpy.ndarray`
    """
    return np.maximum(np.asarray(std, dtype=np.float64), floor)


def ensemble_moments(predictions):
    """
    Mean and population standard deviation over the leading (member) axis.

    :param predictions: array of shape (members, ...)
    :return: tuple (mean, std)
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape[0] == 0:
        raise ValueError("Cannot aggregate an empty ensemble.")
    mean = predictions.mean(axis=0)
    std = np.sqrt(np.mean((predictions - mean) ** 2, axis=0))
    return mean, std
