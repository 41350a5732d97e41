"""Domain types for the Bermudan stopping problem.

A stopping problem instance (an :class:`Episode`) is a window of prices cut
from a :class:`Trajectory`.  Decisions are taken on steps ``t = 0..T``; a
warm-up prefix of ``W`` prices precedes the first decision day and is only
used to fill feature windows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class Action(enum.IntEnum):
    CONTINUE = 0
    STOP = 1


class PayoutKind(str, enum.Enum):
    PUT = "put"
    CALL = "call"
    RELATIVE_PUT = "relative_put"


class StrikeAt(str, enum.Enum):
    """Where an at-the-money strike is fixed inside the episode slice."""

    DECISION_START = "decision_start"
    WARMUP_START = "warmup_start"


@dataclass(frozen=True)
class PayoutSpec:
    """Contract of the option being exercised.

    ``strike=None`` means at-the-money: the strike is read off the episode
    slice at the position selected by ``strike_at``.
    """

    kind: PayoutKind = PayoutKind.PUT
    strike: Optional[float] = None
    discount: float = float(np.exp(-0.05 / 252))
    horizon: int = 38
    window: int = 15
    warmup: int = 12
    strike_at: StrikeAt = StrikeAt.DECISION_START
    rescale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PayoutKind(self.kind))
        object.__setattr__(self, "strike_at", StrikeAt(self.strike_at))
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        if self.strike is not None and not self.strike > 0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def n_features(self) -> int:
        return self.window + 2

    @property
    def slice_length(self) -> int:
        return self.warmup + self.horizon + 1


def payout(spec: PayoutSpec, t: int, S_t, S_0, strike=None):
    """Undiscounted payout for stopping at step ``t`` (vectorised over prices).

    ``strike`` overrides ``spec.strike``; one of the two must be set for
    put/call kinds.  ``S_0`` is the reference price of the relative put.
    """
    S_t = np.asarray(S_t, dtype=float)
    S_0 = np.asarray(S_0, dtype=float)
    if np.any(S_t <= 0) or np.any(S_0 <= 0):
        raise ValueError("prices must be strictly positive")
    if not 0 <= t <= spec.horizon:
        raise ValueError(f"step {t} outside [0, {spec.horizon}]")
    out = _raw_payout(spec.kind, S_t, S_0, spec.strike if strike is None else strike)
    return float(out) if out.ndim == 0 else out


def _raw_payout(kind: PayoutKind, S_t, S_0, K):
    if kind is PayoutKind.RELATIVE_PUT:
        return np.maximum(0.0, S_0 - S_t) / S_0
    if K is None:
        raise ValueError("a strike is required for put/call payouts")
    if kind is PayoutKind.PUT:
        return np.maximum(0.0, K - S_t)
    return np.maximum(0.0, S_t - K)


@dataclass(frozen=True)
class Trajectory:
    id: str
    prices: np.ndarray
    timestamps: Optional[Sequence[str]] = None

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=float)
        if prices.ndim != 1 or prices.size == 0:
            raise ValueError("prices must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise ValueError(f"trajectory {self.id!r} has non-positive or missing prices")
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        if self.timestamps is not None:
            if len(self.timestamps) != prices.size:
                raise ValueError("timestamps and prices differ in length")
            object.__setattr__(self, "timestamps", tuple(self.timestamps))

    def __len__(self):
        return self.prices.size


@dataclass(frozen=True)
class StateVector:
    features: np.ndarray
    t: int

    @property
    def remaining(self) -> int:
        return int(self.features[-2])

    @property
    def moneyness(self) -> float:
        return float(self.features[-1])


@dataclass(frozen=True)
class Episode:
    """A featurised stopping problem.

    ``slice`` holds the ``W + T + 1`` raw prices; decision step ``t`` sits at
    ``slice[W + t]``.  ``features`` has one row per decision step.
    """

    slice: np.ndarray
    strike: float
    reference: float
    features: np.ndarray
    spec: PayoutSpec
    source: tuple = field(default=("", 0))

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def prices(self) -> np.ndarray:
        """Prices on decision steps 0..T."""
        return self.slice[self.spec.warmup:]

    @property
    def states(self) -> list[StateVector]:
        return [StateVector(self.features[t], t) for t in range(self.horizon + 1)]

    def rewards(self) -> np.ndarray:
        """Undiscounted payout for stopping at each step 0..T."""
        return _raw_payout(self.spec.kind, self.prices, self.reference, self.strike)

    def discounted_rewards(self) -> np.ndarray:
        return self.spec.discount ** np.arange(self.horizon + 1) * self.rewards()


@dataclass(frozen=True)
class Transition:
    s: StateVector
    a: Action
    r: float
    s_next: Optional[StateVector]

    def __post_init__(self):
        if self.a is Action.CONTINUE and self.r != 0:
            raise ValueError("continue transitions carry zero reward")
        if self.a is Action.STOP and self.s_next is not None:
            raise ValueError("stop transitions are terminal")

    @property
    def terminal(self) -> bool:
        return self.s_next is None


Policy = Callable[[StateVector], Action]


def stopping_time(policy: Policy, episode: Episode) -> int:
    """First step on which ``policy`` stops; forced to ``T`` otherwise."""
    T = episode.horizon
    for s in episode.states[:T]:
        if Action(policy(s)) is Action.STOP:
            return s.t
    return T


def discounted_return(episode: Episode, tau: int) -> float:
    r = episode.rewards()[tau]
    return float(episode.spec.discount**tau * r)
