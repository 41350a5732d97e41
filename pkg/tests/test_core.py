import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlstop.core import (
    Action,
    PayoutKind,
    PayoutSpec,
    Trajectory,
    Transition,
    StateVector,
    discounted_return,
    payout,
    stopping_time,
)
from rlstop.market import make_episode


def test_put_in_the_money():
    spec = PayoutSpec(kind="put", strike=1.0)
    assert payout(spec, 0, 0.9, 1.0) == pytest.approx(0.1, abs=1e-15)


def test_call_out_of_the_money_clamps():
    spec = PayoutSpec(kind="call", strike=1.0)
    assert payout(spec, 0, 0.9, 1.0) == 0.0


def test_relative_put():
    spec = PayoutSpec(kind=PayoutKind.RELATIVE_PUT)
    assert payout(spec, 3, 90.0, 100.0) == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("S_t,S_0", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_payout_rejects_non_positive_prices(S_t, S_0):
    with pytest.raises(ValueError):
        payout(PayoutSpec(strike=1.0), 0, S_t, S_0)


@pytest.mark.parametrize("bad", [dict(discount=1.5), dict(strike=-1.0), dict(horizon=0),
                                 dict(window=0), dict(warmup=-1)])
def test_spec_invariants(bad):
    with pytest.raises(ValueError):
        PayoutSpec(**bad)


def test_trajectory_rejects_bad_prices():
    with pytest.raises(ValueError):
        Trajectory("x", [1.0, -2.0])
    with pytest.raises(ValueError):
        Trajectory("x", [1.0, np.nan])


def test_transition_contract():
    s = StateVector(np.zeros(4), 0)
    with pytest.raises(ValueError):
        Transition(s, Action.CONTINUE, 0.5, s)
    assert Transition(s, Action.STOP, 0.5, None).terminal


def _episode(prices, **kw):
    spec = PayoutSpec(horizon=len(prices) - 3, window=2, warmup=2, **kw)
    return make_episode(Trajectory("p", np.asarray(prices, dtype=float)), 2, spec)


def test_first_policy_stops_at_zero():
    ep = _episode(np.linspace(1.0, 0.8, 12))
    assert stopping_time(lambda s: Action.STOP, ep) == 0


def test_never_stopping_policy_forced_at_horizon():
    ep = _episode(np.linspace(1.0, 0.8, 12))
    assert stopping_time(lambda s: Action.CONTINUE, ep) == ep.horizon


def test_moneyness_policy_stops_at_first_itm_day():
    prices = np.ones(15)
    prices[2 + 5:] = 0.95  # first in the money on decision day 5
    ep = _episode(prices)
    tau = stopping_time(lambda s: Action.STOP if s.moneyness > 0 else Action.CONTINUE, ep)
    assert tau == 5


prices_st = st.lists(st.floats(0.5, 1.5), min_size=8, max_size=20)


@settings(max_examples=60, deadline=None)
@given(prices_st, st.integers(0, 10_000))
def test_return_bounds_for_any_policy(prices, seed):
    ep = _episode(prices, discount=0.999)
    rng = np.random.default_rng(seed)
    decisions = rng.random(ep.horizon + 1) < 0.3
    tau = stopping_time(lambda s: Action(int(decisions[s.t])), ep)
    assert 0 <= tau <= ep.horizon
    assert discounted_return(ep, tau) >= 0


@settings(max_examples=60, deadline=None)
@given(prices_st, st.integers(0, 5))
def test_unit_discount_put_return_is_raw_payout(prices, tau):
    ep = _episode(prices, discount=1.0)
    tau = min(tau, ep.horizon)
    S = ep.prices[tau]
    assert discounted_return(ep, tau) == max(0.0, ep.strike - S)


@settings(max_examples=60, deadline=None)
@given(prices_st, st.integers(0, 3))
def test_payout_ignores_tail(prices, t):
    ep = _episode(prices)
    t = min(t, ep.horizon)
    tail_changed = np.array(prices, dtype=float)
    tail_changed[2 + t + 1:] *= 1.7
    ep2 = _episode(tail_changed)
    assert ep.rewards()[t] == ep2.rewards()[t]
