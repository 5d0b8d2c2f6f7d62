"""
trajaug
Trajectory augmentation for offline reinforcement learning with snapshot-ensemble sequence world models.
"""

# Add imports here
from . import utils, environments, datasets, seqcore, worldtrain, evaluator, generate, agent, experiment

__version__ = "0.1.0"
