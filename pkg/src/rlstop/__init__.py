"""Deep value-based reinforcement learning for Bermudan optimal stopping."""

from .core import Action, Episode, PayoutKind, PayoutSpec, StateVector, StrikeAt, Trajectory, payout, stopping_time
from .market import Dataset, EpisodeBatch, GbmParams, Split, gbm_episodes, load_csv, make_episode

__version__ = "0.1.0"
