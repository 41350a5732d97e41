"""Benchmark exercise policies and classical pricers.

Policies expose two faces: ``policy(state) -> Action`` for single decisions
and ``policy.stopping_times(batch, rng)`` for vectorised evaluation over an
:class:`~rlstop.market.EpisodeBatch`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import Action, PayoutKind, PayoutSpec, StateVector


def first_stop(stop: np.ndarray) -> np.ndarray:
    """Stopping times from a boolean ``(n, T + 1)`` stop mask; step ``T`` is forced."""
    stop = np.array(stop, dtype=bool, copy=True)
    stop[:, -1] = True
    return stop.argmax(axis=1)


# ---------------------------------------------------------------- trivial policies

class BaselineKind(str, enum.Enum):
    RAND = "rand"
    FIRST = "first"
    LAST = "last"


def baseline_policy(kind, s: StateVector, rng: Optional[np.random.Generator] = None) -> Action:
    """Stateless form of the trivial benchmarks.

    ``Rand`` stops with hazard ``1 / (T - t + 1)``, which makes the stopping
    time uniform on ``{0..T}`` without remembering a per-episode draw.
    """
    kind = BaselineKind(kind)
    if s.remaining == 0 or kind is BaselineKind.FIRST:
        return Action.STOP
    if kind is BaselineKind.LAST:
        return Action.CONTINUE
    if rng is None:
        raise ValueError("the Rand policy needs an rng")
    return Action.STOP if rng.random() < 1.0 / (s.remaining + 1) else Action.CONTINUE


class FirstPolicy:
    label = "First"

    def __call__(self, s: StateVector) -> Action:
        return Action.STOP

    def stopping_times(self, batch, rng=None):
        return np.zeros(len(batch), dtype=int)


class LastPolicy:
    label = "Last"

    def __call__(self, s: StateVector) -> Action:
        return Action.STOP if s.remaining == 0 else Action.CONTINUE

    def stopping_times(self, batch, rng=None):
        return np.full(len(batch), batch.spec.horizon, dtype=int)


class RandPolicy:
    """Stops on a day drawn uniformly from ``{0..T}`` once per episode."""

    label = "Rand"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._tau = None

    def begin_episode(self, horizon: int) -> None:
        self._tau = int(self.rng.integers(horizon + 1))

    def __call__(self, s: StateVector) -> Action:
        if self._tau is None:
            raise RuntimeError("call begin_episode first")
        return Action.STOP if s.t >= self._tau else Action.CONTINUE

    def stopping_times(self, batch, rng=None):
        rng = self.rng if rng is None else rng
        return rng.integers(batch.spec.horizon + 1, size=len(batch))


# ---------------------------------------------------------------- Black-Scholes

def _bs_d(S0, K, r, sigma, T):
    vol = sigma * math.sqrt(T)
    d1 = (math.log(S0 / K) + (r + 0.5 * sigma**2) * T) / vol
    return d1, d1 - vol


def bs_european_put(S0: float, K: float, r: float, sigma: float, T: float) -> float:
    if S0 <= 0 or K <= 0 or sigma < 0 or T < 0:
        raise ValueError("S0, K must be positive and sigma, T non-negative")
    if sigma == 0 or T == 0:
        return max(0.0, K * math.exp(-r * T) - S0)
    d1, d2 = _bs_d(S0, K, r, sigma, T)
    return K * math.exp(-r * T) * norm.cdf(-d2) - S0 * norm.cdf(-d1)


def bs_european_call(S0: float, K: float, r: float, sigma: float, T: float) -> float:
    if S0 <= 0 or K <= 0 or sigma < 0 or T < 0:
        raise ValueError("S0, K must be positive and sigma, T non-negative")
    if sigma == 0 or T == 0:
        return max(0.0, S0 - K * math.exp(-r * T))
    d1, d2 = _bs_d(S0, K, r, sigma, T)
    return S0 * norm.cdf(d1) - K * math.exp(-r * T) * norm.cdf(d2)


# ---------------------------------------------------------------- CRR tree

class Style(str, enum.Enum):
    EUROPEAN = "european"
    BERMUDAN = "bermudan"


@dataclass(frozen=True)
class TreeSpec:
    steps: int
    S0: float
    K: float
    r: float
    sigma: float
    dt: float
    style: Style = Style.BERMUDAN
    kind: PayoutKind = PayoutKind.PUT

    def __post_init__(self):
        object.__setattr__(self, "style", Style(self.style))
        object.__setattr__(self, "kind", PayoutKind(self.kind))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.S0 <= 0 or self.K <= 0 or self.dt <= 0 or self.sigma < 0:
            raise ValueError("invalid tree parameters")

    @classmethod
    def from_maturity(cls, steps, S0, K, r, sigma, T_years, **kw):
        return cls(steps, S0, K, r, sigma, T_years / steps, **kw)

    @property
    def up(self) -> float:
        return math.exp(self.sigma * math.sqrt(self.dt))

    @property
    def prob(self) -> float:
        u = self.up
        d = 1.0 / u
        return (math.exp(self.r * self.dt) - d) / (u - d) if u != d else float("nan")


def _intrinsic(kind, S, K):
    return np.maximum(S - K, 0.0) if kind is PayoutKind.CALL else np.maximum(K - S, 0.0)


def crr_price(spec: TreeSpec) -> tuple[float, list]:
    """Backward induction on the Cox-Ross-Rubinstein lattice.

    Returns the root price and, per step ``i``, a boolean array over the
    ``i + 1`` nodes (node ``j`` has price ``S0 u^(2j - i)``) marking where
    immediate exercise is optimal.  European trees only mark maturity.
    """
    p = spec.prob
    if not 0.0 < p < 1.0:
        raise ValueError(f"risk-neutral probability {p} outside (0, 1)")
    u, n = spec.up, spec.steps
    disc = math.exp(-spec.r * spec.dt)
    j = np.arange(n + 1)
    S = spec.S0 * u ** (2 * j - n)
    values = _intrinsic(spec.kind, S, spec.K)
    table = [None] * (n + 1)
    table[n] = values > 0
    bermudan = spec.style is Style.BERMUDAN
    for i in range(n - 1, -1, -1):
        values = disc * (p * values[1:] + (1 - p) * values[:-1])
        if bermudan:
            j = np.arange(i + 1)
            exercise = _intrinsic(spec.kind, spec.S0 * u ** (2 * j - i), spec.K)
            stop = (exercise > 0) & (exercise >= values)
            values = np.where(stop, exercise, values)
            table[i] = stop
        else:
            table[i] = np.zeros(i + 1, dtype=bool)
    return float(values[0]), table


def bermudan_batch(S, K, sigma, r: float, dt: float, steps: int, kind=PayoutKind.PUT):
    """Root value and root continuation value of a batch of Bermudan CRR trees.

    ``S``, ``K`` and ``sigma`` broadcast to one tree per row, all sharing
    ``steps``.  Rows whose volatility leaves the CRR probability outside
    ``(0, 1)`` (near-zero ``sigma``) get the zero-volatility limit: value
    equal to intrinsic, continuation zero.
    """
    kind = PayoutKind(kind)
    S, K, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (S, K, sigma)))
    S, K, sigma = S.ravel(), K.ravel(), sigma.ravel()
    intrinsic = _intrinsic(kind, S, K)
    value, cont = intrinsic.copy(), np.zeros_like(intrinsic)
    if steps == 0:
        return value, cont
    u = np.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    with np.errstate(divide="ignore", invalid="ignore"):
        p = (math.exp(r * dt) - d) / (u - d)
    rows = np.flatnonzero((p > 0) & (p < 1))
    if rows.size:
        uu, pp, SS, KK = u[rows, None], p[rows, None], S[rows, None], K[rows, None]
        disc = math.exp(-r * dt)
        j = np.arange(steps + 1)
        values = _intrinsic(kind, SS * uu ** (2 * j - steps), KK)
        for i in range(steps - 1, -1, -1):
            values = disc * (pp * values[:, 1:] + (1 - pp) * values[:, :-1])
            if i == 0:
                cont[rows] = values[:, 0]
            j = np.arange(i + 1)
            values = np.maximum(values, _intrinsic(kind, SS * uu ** (2 * j - i), KK))
        value[rows] = values[:, 0]
    return value, cont


def tree_stop_decisions(S, K, sigma, r: float, dt: float, steps: int, kind=PayoutKind.PUT) -> np.ndarray:
    """Root exercise decisions for a batch of Bermudan trees.

    A tree stops iff intrinsic value is positive and at least the
    discounted continuation (so a zero-volatility tree stops iff in the money).
    """
    kind = PayoutKind(kind)
    S, K, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (S, K, sigma)))
    _, cont = bermudan_batch(S, K, sigma, r, dt, steps, kind)
    intrinsic = _intrinsic(kind, S.ravel(), K.ravel())
    return (intrinsic > 0) & (intrinsic >= cont)


@lru_cache(maxsize=4096)
def put_exercise_boundary(sigma: float, r: float, dt: float, steps: int) -> float:
    """Largest moneyness ratio ``S / K`` at which a put with ``steps`` remaining stops.

    Exercise regions of a put are down-closed in price, so bisection on the
    single-tree decision recovers the boundary.
    """
    if steps == 0:
        return 1.0
    lo, hi = 1e-6, 1.0
    if not tree_stop_decisions(lo, 1.0, sigma, r, dt, steps)[0]:
        return 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if tree_stop_decisions(mid, 1.0, sigma, r, dt, steps)[0]:
            lo = mid
        else:
            hi = mid
    return lo


def calibrate_sigma(prices, dt: float) -> float:
    """Annualised sample standard deviation of log-returns."""
    prices = np.asarray(prices, dtype=float)
    if prices.size < 2:
        raise ValueError("need at least two prices")
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    rets = np.diff(np.log(prices))
    if rets.size < 2:
        return 0.0
    sd = rets.std(ddof=1)
    return float(sd / math.sqrt(dt)) if sd > 1e-15 else 0.0


def _strike_from_state(features: np.ndarray, spec: PayoutSpec, t: np.ndarray):
    """Recover ``(S_t, K)`` from the price window and moneyness features."""
    L = spec.window
    S = features[..., L - 1]
    money = features[..., L + 1]
    beta_t = spec.discount ** np.asarray(t, dtype=float)
    if spec.kind is PayoutKind.CALL:
        K = np.where(money > 0, S - money / beta_t, S - money)
    else:
        K = np.where(money > 0, S + money / beta_t, S + money)
    return S, K


class TreePolicy:
    """Binomial-tree exercise rule re-priced at every decision step.

    ``sigma=None`` calibrates volatility on the ``L``-price window inside
    each state; a number uses that volatility throughout.  The rate is the
    one implied by the payout's per-step discount.  Each state gets a tree with
    one step per remaining day (``substeps`` per day if refined).
    """

    label = "B.M."

    def __init__(self, spec: PayoutSpec, sigma: Optional[float] = None, dt: float = 1 / 252,
                 substeps: int = 1):
        self.spec, self.sigma, self.dt, self.substeps = spec, sigma, dt, substeps
        self.r = -math.log(spec.discount) / dt if spec.discount > 0 else 0.0
        self.kind = PayoutKind.CALL if spec.kind is PayoutKind.CALL else PayoutKind.PUT

    def _decide(self, features: np.ndarray, t: int) -> np.ndarray:
        """Stop decisions for a stack of states all at step ``t``."""
        T = self.spec.horizon
        if t == T:
            return np.ones(len(features), dtype=bool)
        S, K = _strike_from_state(features, self.spec, t)
        m = (T - t) * self.substeps
        dt = self.dt / self.substeps
        if self.sigma is not None and self.kind is PayoutKind.PUT:
            if self.sigma * math.sqrt(dt) <= self.r * dt:
                return K - S > 0
            x = put_exercise_boundary(float(self.sigma), self.r, dt, m)
            return (K - S > 0) & (S <= x * K)
        if self.sigma is None:
            window = features[:, :self.spec.window]
            rets = np.diff(np.log(window), axis=1)
            sig = rets.std(axis=1, ddof=1) / math.sqrt(self.dt) if rets.shape[1] > 1 else np.zeros(len(S))
            sig = np.where(sig > 1e-12, sig, 0.0)
        else:
            sig = np.full(len(S), float(self.sigma))
        return tree_stop_decisions(S, K, sig, self.r, dt, m, self.kind)

    def __call__(self, s: StateVector) -> Action:
        return Action.STOP if self._decide(s.features[None], s.t)[0] else Action.CONTINUE

    def stopping_times(self, batch, rng=None):
        n, T = len(batch), batch.spec.horizon
        tau = np.full(n, T)
        alive = np.ones(n, dtype=bool)
        for t in range(T):
            rows = np.flatnonzero(alive)
            if rows.size == 0:
                break
            stop = self._decide(batch.features[rows, t], t)
            tau[rows[stop]] = t
            alive[rows[stop]] = False
        return tau


def bt_policy(s: StateVector, spec: PayoutSpec, sigma: Optional[float] = None, dt: float = 1 / 252) -> Action:
    """Single-state tree decision; ``sigma=None`` calibrates on the state's window."""
    return TreePolicy(spec, sigma, dt)(s)
