"""
evaluator.py
Conservative reward correction of generated trajectories from ensemble disagreement.
"""

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import softmax


@dataclass(frozen=True)
class EvaluatorConfig:
    """
    ``temperature`` is the softmax temperature over state uncertainties. ``enabled=False`` is the
    pass-through used by the no-correction ablation.
    """

    temperature: float = 0.7
    enabled: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Evaluator temperature must be positive, got {self.temperature}.")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def state_uncertainty(per_dim_std):
    """
    Scalar state uncertainty: the mean of the per-dimension ensemble std over the last axis.

    :param per_dim_std: array (d_s,) or (h, d_s) of non-negative stds
    :return: float or array (h,)
    """
    std = np.asarray(per_dim_std, dtype=np.float64)
    if std.ndim == 0 or std.shape[-1] == 0:
        raise ValueError("State uncertainty of an empty vector is undefined.")
    if np.any(std < 0):
        raise ValueError("Ensemble std components must be non-negative.")
    result = std.mean(axis=-1)
    return float(result) if result.ndim == 0 else result


def correction_factors(sigma_s, omega):
    """
    ``1 - softmax(sigma_s / omega)`` over the steps of one trajectory.
    """
    sigma_s = np.asarray(sigma_s, dtype=np.float64)
    if sigma_s.ndim != 1 or len(sigma_s) < 2:
        raise ValueError(f"Correction needs a trajectory of at least 2 steps, got {sigma_s.shape}.")
    if not omega > 0:
        raise ValueError(f"Evaluator temperature must be positive, got {omega}.")
    return 1.0 - softmax(sigma_s / omega)


def correct_rewards(r_hat, sigma_r, sigma_s, omega):
    """
    ``r*_t = (1 - softmax_t(sigma_s / omega)) * (r_hat_t - sigma_r_t)``, the softmax spanning all h
    steps of the trajectory.

    :param r_hat: predicted rewards (h,)
    :param sigma_r: reward ensemble stds (h,)
    :param sigma_s: scalar state uncertainties of the predicted next states (h,)
    :param omega: temperature, > 0
    :return: :py:class:`numpy.ndarray` of corrected rewards (h,)
    """
    r_hat = np.asarray(r_hat, dtype=np.float64)
    sigma_r = np.asarray(sigma_r, dtype=np.float64)
    sigma_s = np.asarray(sigma_s, dtype=np.float64)
    if not (r_hat.shape == sigma_r.shape == sigma_s.shape):
        raise ValueError(f"Shapes differ: r_hat {r_hat.shape}, sigma_r {sigma_r.shape}, sigma_s {sigma_s.shape}.")
    if np.any(sigma_r < 0) or np.any(sigma_s < 0):
        raise ValueError("Uncertainties must be non-negative.")
    return correction_factors(sigma_s, omega) * (r_hat - sigma_r)


def correct_trajectory(generated, config):
    """
    Corrected rewards of a :py:class:`trajaug.generate.GeneratedTrajectory`; the raw predicted rewards
    when correction is disabled.

    :param generated: :py:class:`trajaug.generate.GeneratedTrajectory`
    :param config: :py:class:`EvaluatorConfig`
    :return: :py:class:`numpy.ndarray` (h,)
    """
    if not config.enabled:
        return np.array(generated.rewards, dtype=np.float64)
    return correct_rewards(
        generated.rewards, generated.reward_std, state_uncertainty(generated.state_std), config.temperature
    )
