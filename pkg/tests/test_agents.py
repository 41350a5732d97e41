import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from _oracles import c51_project_bruteforce, random_c51_case
from rlstop.agents import (
    AgentConfig,
    CategoricalSupport,
    EpisodeBuffer,
    ExplorationSchedule,
    ReplayMemory,
    build_transitions,
    c51_project,
    cosine_features,
    ddqn_target,
    default_config,
    dueling_combine,
    fit_scaler,
    load_agent,
    make_agent,
    quantile_huber_loss,
    run_episode,
    train,
    train_step,
)
from rlstop.agents.common import HYPERPARAMS, blend
from rlstop.agents.ddqn import dueling_backward
from rlstop.core import Action, PayoutSpec
from rlstop.market import GbmParams, gbm_episodes
from rlstop.nn import numerical_gradient, relative_error

SPEC = PayoutSpec()


def _buffer(tau, reward, d=3, horizon=5, start=0.0):
    feats = start + np.arange((tau + 1) * d, dtype=float).reshape(tau + 1, d)
    return EpisodeBuffer(feats, reward, horizon)


# ---------------------------------------------------------------- config

def test_default_hyperparameters():
    c = default_config("ddqn")
    assert (c.lr, c.batch_size, c.capacity, c.target_update) == (1e-4, 128, 10000, 300)
    assert c.n_step == 7 and c.dueling and c.double
    assert default_config("c51").lr == 0.0025
    assert default_config("iqn", "sp500").sync.value == "soft"
    assert set(HYPERPARAMS) == {(t, a) for t in ("gbm", "sp500") for a in ("ddqn", "c51", "iqn")}


def test_config_round_trip_and_errors():
    c = default_config("c51", reward_scale=3.0)
    assert AgentConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        AgentConfig.from_dict({"algorithm": "ddqn", "nope": 1})
    with pytest.raises(ValueError) as exc:
        AgentConfig(lr=-1, batch_size=0, dropout=1.5)
    msg = str(exc.value)
    assert "lr" in msg and "batch_size" in msg and "dropout" in msg


# ---------------------------------------------------------------- replay

def test_fifo_eviction_at_capacity():
    mem = ReplayMemory(3)
    bufs = [_buffer(1, float(i)) for i in range(5)]
    for b in bufs:
        mem.add(b)
    assert len(mem) == 3
    assert [mem[i].reward for i in range(3)] == [2.0, 3.0, 4.0]


def test_sample_without_replacement():
    mem = ReplayMemory(10)
    for i in range(4):
        mem.add(_buffer(1, float(i)))
    got = mem.sample(10, np.random.default_rng(0))
    assert sorted(b.reward for b in got) == [0.0, 1.0, 2.0, 3.0]


def test_transitions_one_step():
    b = build_transitions([_buffer(2, 0.5), _buffer(0, 0.2)], gamma=0.9, n_step=1)
    assert b.t.tolist() == [0, 1, 2, 0]
    assert b.actions.tolist() == [0, 0, 1, 1]
    assert b.ret.tolist() == [0.0, 0.0, 0.5, 0.2]
    assert b.boot.tolist() == [1, 2, -1, -1]
    assert b.terminal.tolist() == [False, False, True, True]


def test_transitions_n_step_truncated_at_stop():
    b = build_transitions([_buffer(4, 1.0)], gamma=0.5, n_step=3)
    # a window of 3 from t covers t..t+2, so only t >= 2 sees the stop at step 4
    assert b.ret.tolist() == [0.0, 0.0, 0.25, 0.5, 1.0]
    assert b.boot.tolist() == [3, 4, -1, -1, -1]
    assert b.boot_discount[0] == 0.125


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=1, max_size=5), st.integers(1, 7),
       st.floats(0.5, 1.0))
def test_transitions_match_direct_sum(taus, n, gamma):
    bufs = [_buffer(t, 1.0 + k, horizon=8) for k, t in enumerate(taus)]
    b = build_transitions(bufs, gamma, n)
    row = 0
    for buf in bufs:
        for t in range(len(buf)):
            k = buf.stop_step - t
            assert b.ret[row] == pytest.approx(gamma**k * buf.reward if k < n else 0.0)
            assert (b.boot[row] >= 0) == (k >= n)
            row += 1


# ---------------------------------------------------------------- DDQN

def _batch_with_boot():
    return build_transitions([_buffer(2, 0.5, horizon=2), _buffer(1, 0.3, horizon=2)], 0.9, 1)


def test_ddqn_target_plain_max():
    b = _batch_with_boot()
    rows = b.boot_rows  # states t=1 and t=2 of the first episode, t=1 of the second
    q = np.array([[0.1, 0.4], [0.7, 0.2], [0.3, 0.6]])
    y = ddqn_target(b, q)
    # t=2 is the horizon so only Stop counts there
    assert y[rows].tolist() == pytest.approx([0.9 * 0.4, 0.9 * 0.2, 0.9 * 0.6])
    assert y[2] == 0.5 and y[4] == 0.3


def test_ddqn_target_double_estimator():
    b = _batch_with_boot()
    q_tgt = np.array([[0.1, 0.4], [0.7, 0.2], [0.3, 0.6]])
    q_onl = np.array([[0.9, 0.0], [0.0, 0.1], [0.8, 0.1]])
    y = ddqn_target(b, q_tgt, q_onl)
    assert y[b.boot_rows].tolist() == pytest.approx([0.9 * 0.1, 0.9 * 0.2, 0.9 * 0.3])


def test_dueling_combine_examples():
    Q = dueling_combine([1.0, -2.0], [[0.5, 0.2], [3.0, 3.5]])
    np.testing.assert_allclose(Q, [[1.0, 0.7], [-2.5, -2.0]], atol=1e-15)


def test_dueling_backward_fd():
    rng = np.random.default_rng(0)
    V = rng.normal(size=4)
    A = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 2))
    gV, gA = dueling_backward(A, w)
    f = lambda: float((dueling_combine(V, A) * w).sum())
    assert relative_error(gV, numerical_gradient(f, V)) < 1e-8
    assert relative_error(gA, numerical_gradient(f, A)) < 1e-8


# ---------------------------------------------------------------- C51

def test_c51_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(300):
        r, g, p, lo, hi, n, term = random_c51_case(rng)
        got = c51_project(r, g, p, CategoricalSupport(lo, hi, n), term)
        ref = c51_project_bruteforce(r, g, p, lo, hi, n, term)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
        assert abs(got.sum() - 1) < 1e-9


def test_c51_terminal_on_atom():
    sup = CategoricalSupport(0, 1, 11)
    m = c51_project(0.3, 0.9, np.full(11, 1 / 11), sup, terminal=True)
    assert m[3] == pytest.approx(1.0) and m.sum() == pytest.approx(1.0)


def test_c51_terminal_between_atoms_and_clamped():
    sup = CategoricalSupport(0, 1, 5)
    m = c51_project(0.3, 1.0, np.full(5, 0.2), sup, terminal=True)
    assert m[1] == pytest.approx(0.8) and m[2] == pytest.approx(0.2)
    m = c51_project(7.0, 1.0, np.full(5, 0.2), sup, terminal=True)
    assert m[-1] == 1.0


def test_c51_batched_rows_match_single():
    rng = np.random.default_rng(3)
    sup = CategoricalSupport(-1, 2, 7)
    P = rng.dirichlet(np.ones(7), size=6)
    r = rng.uniform(-1, 2, size=6)
    term = np.array([0, 1, 0, 1, 0, 0], bool)
    M = c51_project(r, 0.8, P, sup, term)
    for i in range(6):
        np.testing.assert_allclose(M[i], c51_project(r[i], 0.8, P[i], sup, term[i]), atol=1e-15)


# ---------------------------------------------------------------- IQN

def test_cosine_features():
    phi = cosine_features(np.array([0.25]), 4)
    np.testing.assert_allclose(phi[0], np.cos(np.pi * np.arange(4) * 0.25))
    with pytest.raises(ValueError):
        cosine_features(np.array([0.0]), 4)


def test_quantile_huber_examples():
    # one online quantile, one target sample: delta = 2 with kappa = 1
    loss = quantile_huber_loss(np.array([[2.0]]), np.array([0.25]), 1.0)
    assert loss == pytest.approx(0.25 * 1.5)
    loss = quantile_huber_loss(np.array([[-2.0]]), np.array([0.25]), 1.0)
    assert loss == pytest.approx(0.75 * 1.5)
    loss = quantile_huber_loss(np.array([[0.5]]), np.array([0.9]), 1.0)
    assert loss == pytest.approx(0.9 * 0.125)


def test_quantile_loss_minimiser_is_the_quantile():
    # with small kappa the loss is minimised near the empirical tau-quantile
    samples = np.random.default_rng(0).normal(size=2000)
    grid = np.linspace(-2, 2, 401)
    for tau in (0.1, 0.5, 0.8):
        losses = [quantile_huber_loss((samples - q)[None, :], np.array([tau]), 0.01) for q in grid]
        best = grid[int(np.argmin(losses))]
        assert abs(best - np.quantile(samples, tau)) < 0.03


# ---------------------------------------------------------------- sync

def _agent(algo="ddqn", **kw):
    return make_agent(default_config(algo, **kw), SPEC, seed=1)


def _memory(agent, n=20, seed=0):
    rng = np.random.default_rng(seed)
    b = gbm_episodes(GbmParams(), SPEC, n, seed=seed)
    mem = ReplayMemory(100)
    for i in range(n):
        mem.add(run_episode(agent, b.episode(i), 1.0, rng))
    return mem


@pytest.mark.parametrize("algo", ["ddqn", "c51", "iqn"])
def test_hard_sync_every_U_episodes(algo):
    ag = _agent(algo, target_update=3, dropout=0.0)
    mem = _memory(ag)
    rng = np.random.default_rng(1)
    for k in range(1, 10):
        ag.episodes += 1
        train_step(ag, mem, rng)
        same = all(np.array_equal(a, b) for a, b in zip(ag.online.parameters(), ag.target.parameters()))
        assert same == (k % 3 == 0)


def test_soft_sync_blend_formula():
    ag = _agent("c51", sync="soft", soft_tau=0.01)
    before = [p.copy() for p in ag.target.parameters()]
    mem = _memory(ag)
    ag.episodes += 1
    train_step(ag, mem, np.random.default_rng(2))
    for t0, t1, th in zip(before, ag.target.parameters(), ag.online.parameters()):
        np.testing.assert_allclose(t1, 0.01 * th + 0.99 * t0, rtol=0, atol=1e-12)


def test_blend_endpoints():
    a, b = [np.ones(3)], [np.zeros(3)]
    blend(a, b, 1.0)
    assert not a[0].any()


# ---------------------------------------------------------------- exploration

def test_schedule_shape():
    s = ExplorationSchedule(1001)
    assert s(0) == pytest.approx(1.0)
    assert s(200) == pytest.approx(0.1)
    assert s(1000) == pytest.approx(0.01)
    vals = [s(i) for i in range(1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_random_episodes_are_uniform():
    ag = _agent()
    b = gbm_episodes(GbmParams(), SPEC, 200, seed=5)
    rng = np.random.default_rng(6)
    taus = [run_episode(ag, b.episode(i % 200), 1.0, rng).stop_step for i in range(4000)]
    counts = np.bincount(taus, minlength=SPEC.horizon + 1)
    assert stats.chisquare(counts).pvalue > 0.01


def test_reward_scaling_and_predisc():
    ag = make_agent(default_config("ddqn", reward_scale=10.0, pre_discounted=True), SPEC)
    assert ag.gamma == 1.0
    ep = gbm_episodes(GbmParams(), SPEC, 1, seed=0).episode(0)
    buf = run_episode(ag, ep, 1.0, np.random.default_rng(0))
    tau = buf.stop_step
    assert buf.reward == pytest.approx(10 * SPEC.discount**tau * ep.rewards()[tau])


# ---------------------------------------------------------------- acting

def test_horizon_forces_stop_and_ties_continue():
    ag = _agent(out_init_scale=1e-300)
    for net in (ag.online,):
        for p in net.parameters():
            p[...] = 0.0
    ep = gbm_episodes(GbmParams(), SPEC, 1, seed=0).episode(0)
    mask = ag.stop_mask(ep.features)
    assert not mask[:-1].any() and mask[-1]
    assert ag.admissible_argmax(np.array([[1.0, 0.0]]), np.array([SPEC.horizon]))[0] == int(Action.STOP)
    assert ag.admissible_max(np.array([[1.0, 0.0]]), np.array([SPEC.horizon]))[0] == 0.0


@pytest.mark.parametrize("algo", ["ddqn", "c51", "iqn"])
def test_learning_fits_a_fixed_batch(algo):
    ag = make_agent(default_config(algo, dropout=0.0, lr=1e-3, reward_scale=10.0, out_init_scale=0.01),
                    SPEC, fit_scaler(gbm_episodes(GbmParams(), SPEC, 200, seed=9), SPEC,
                                     np.random.default_rng(0)), seed=0)
    mem = _memory(ag, n=8)
    batch = build_transitions([mem[i] for i in range(len(mem))], ag.gamma, 1)
    rng = np.random.default_rng(0)
    # terminal-only targets do not move, so the loss must fall
    term = build_transitions([EpisodeBuffer(b.features[-1:], b.reward, b.horizon) for b in mem], ag.gamma, 1)
    first = ag.learn(term, rng)
    for _ in range(300):
        last = ag.learn(term, rng)
    assert last < 0.2 * first
    assert np.isfinite(ag.learn(batch, rng))


@pytest.mark.parametrize("algo", ["ddqn", "c51", "iqn"])
def test_training_is_deterministic(algo, tmp_path):
    b = gbm_episodes(GbmParams(), SPEC, 60, seed=3)
    out = []
    for _ in range(2):
        ag = make_agent(default_config(algo), SPEC, fit_scaler(b, SPEC, np.random.default_rng(0)), seed=4)
        train(ag, b, 30, seed=7)
        out.append([p.copy() for p in ag.online.parameters()])
    assert all(np.array_equal(x, y) for x, y in zip(*out))


@pytest.mark.parametrize("algo", ["ddqn", "c51", "iqn"])
def test_checkpoint_restores_policy(algo, tmp_path):
    b = gbm_episodes(GbmParams(), SPEC, 40, seed=3)
    ag = make_agent(default_config(algo), SPEC, fit_scaler(b, SPEC, np.random.default_rng(0)), seed=4)
    train(ag, b, 15, seed=7)
    ag.save(tmp_path / "a.json")
    back = load_agent(tmp_path / "a.json")
    x = b.features.reshape(-1, SPEC.n_features)
    assert np.array_equal(back.q_values(x), ag.q_values(x))
    assert np.array_equal(back.stopping_times(b), ag.stopping_times(b))
    assert back.cfg == ag.cfg and back.episodes == 15


def test_iqn_policy_is_deterministic():
    ag = _agent("iqn")
    x = gbm_episodes(GbmParams(), SPEC, 5, seed=0).features.reshape(-1, SPEC.n_features)
    assert np.array_equal(ag.q_values(x), ag.q_values(x))


def test_nan_loss_aborts_training():
    b = gbm_episodes(GbmParams(), SPEC, 20, seed=3)
    ag = make_agent(default_config("ddqn"), SPEC, seed=0)
    ag.online.layers[1].W[...] = np.nan
    with pytest.raises(FloatingPointError):
        train(ag, b, 5, seed=0)
