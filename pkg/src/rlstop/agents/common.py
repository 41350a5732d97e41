"""Shared agent machinery: configuration, episode replay, exploration, training loop."""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..core import Action, Episode, PayoutSpec, StateVector
from ..market import Dataset, EpisodeBatch, EpisodeSampler
from ..nn import AdamState, Network, Standardize, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ALGORITHMS = ("ddqn", "c51", "iqn")


class SyncMode(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass
class AgentConfig:
    algorithm: str = "ddqn"
    lr: float = 1e-4
    batch_size: int = 128
    capacity: int = 10000
    target_update: int = 300
    sync: SyncMode = SyncMode.HARD
    soft_tau: float = 0.001
    n_step: int = 1
    dueling: bool = False
    double: bool = True
    dropout: float = 0.2
    hidden: tuple = (64, 64)
    gamma: Optional[float] = None
    pre_discounted: bool = False
    huber_kappa: float = 1.0
    reward_scale: float = 1.0
    out_init_scale: float = 1.0
    epochs: int = 5
    shuffle: bool = True
    # C51
    n_atoms: int = 51
    v_min: float = 0.0
    v_max: float = 1.0
    # IQN
    n_quantiles: int = 8
    n_target_quantiles: int = 8
    n_embed: int = 64
    n_policy_quantiles: int = 32
    # exploration
    eps_start: float = 1.0
    eps_mid: float = 0.1
    eps_final: float = 0.01
    eps_fast_fraction: float = 0.2

    def __post_init__(self):
        self.algorithm = self.algorithm.lower()
        self.sync = SyncMode(self.sync)
        self.hidden = tuple(self.hidden)
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        e = []
        if self.algorithm not in ALGORITHMS:
            e.append(f"algorithm must be one of {ALGORITHMS}")
        if not self.lr > 0:
            e.append("lr must be positive")
        if self.batch_size < 1:
            e.append("batch_size must be >= 1")
        if self.capacity < 1:
            e.append("capacity must be >= 1")
        if self.target_update < 1:
            e.append("target_update must be >= 1")
        if not 0 < self.soft_tau <= 1:
            e.append("soft_tau must lie in (0, 1]")
        if self.n_step < 1:
            e.append("n_step must be >= 1")
        if not self.reward_scale > 0 or not self.out_init_scale > 0:
            e.append("reward_scale and out_init_scale must be positive")
        if not 0 <= self.dropout < 1:
            e.append("dropout must lie in [0, 1)")
        if self.gamma is not None and not 0 <= self.gamma <= 1:
            e.append("gamma must lie in [0, 1]")
        if self.n_atoms < 2 or not self.v_min < self.v_max:
            e.append("C51 support needs n_atoms >= 2 and v_min < v_max")
        if min(self.n_quantiles, self.n_target_quantiles, self.n_embed, self.n_policy_quantiles) < 1:
            e.append("IQN sample counts must be >= 1")
        if self.epochs < 1:
            e.append("epochs must be >= 1")
        return e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sync"] = self.sync.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent config fields: {sorted(unknown)}")
        return cls(**d)


# Final hyper-parameters per task and algorithm; n-step and dueling only help DDQN.
HYPERPARAMS = {
    ("gbm", "ddqn"): dict(lr=0.0001, batch_size=128, capacity=10000, target_update=300),
    ("gbm", "c51"): dict(lr=0.0025, batch_size=64, capacity=3000, target_update=30),
    ("gbm", "iqn"): dict(lr=0.00005, batch_size=128, capacity=3000, target_update=1000),
    ("sp500", "ddqn"): dict(lr=0.005, batch_size=64, capacity=10000, target_update=300),
    ("sp500", "c51"): dict(lr=0.0025, batch_size=64, capacity=3000, target_update=30, sync="soft"),
    ("sp500", "iqn"): dict(lr=0.0025, batch_size=64, capacity=3000, target_update=100, sync="soft"),
}


def default_config(algorithm: str, task: str = "gbm", **overrides) -> AgentConfig:
    algorithm = algorithm.lower()
    base = dict(HYPERPARAMS[(task, algorithm)])
    if algorithm == "ddqn":
        base.update(n_step=7, dueling=True)
    base.update(overrides)
    return AgentConfig(algorithm=algorithm, **base)


# ---------------------------------------------------------------- replay

@dataclass(frozen=True)
class EpisodeBuffer:
    """Transitions of one episode up to and including its stopping step.

    Row ``t`` of ``features`` is state ``s_t``; every step before the last
    is a Continue with zero reward, the last is the Stop with ``reward``.
    """

    features: np.ndarray
    reward: float
    horizon: int
    random: bool = False

    def __len__(self):
        return self.features.shape[0]

    @property
    def stop_step(self) -> int:
        return len(self) - 1

    def rewards(self) -> np.ndarray:
        r = np.zeros(len(self))
        r[-1] = self.reward
        return r

    def actions(self) -> np.ndarray:
        a = np.full(len(self), int(Action.CONTINUE))
        a[-1] = int(Action.STOP)
        return a


class ReplayMemory:
    """FIFO store of episode buffers, bounded by ``capacity`` episodes."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._store: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._store)

    def __getitem__(self, i):
        return self._store[i]

    def add(self, buf: EpisodeBuffer) -> None:
        self._store.append(buf)

    def sample(self, k: int, rng: np.random.Generator) -> list[EpisodeBuffer]:
        k = min(k, len(self._store))
        idx = rng.choice(len(self._store), size=k, replace=False)
        return [self._store[i] for i in idx]


@dataclass
class TransitionBatch:
    """Flattened transitions of sampled buffers, with n-step bookkeeping.

    ``ret`` holds the discounted reward sum over the (possibly truncated)
    n-step window; where the window reaches the stop step ``boot`` is -1,
    otherwise it indexes the bootstrap state ``s_{t+n}`` inside ``states``
    and ``boot_discount`` is ``gamma**n``.
    """

    states: np.ndarray
    t: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    ret: np.ndarray
    boot: np.ndarray
    boot_discount: np.ndarray
    horizon: int

    def __len__(self):
        return self.states.shape[0]

    @property
    def boot_rows(self) -> np.ndarray:
        return np.flatnonzero(self.boot >= 0)


def build_transitions(buffers: Sequence[EpisodeBuffer], gamma: float, n_step: int = 1) -> TransitionBatch:
    if n_step < 1:
        raise ValueError("n_step must be >= 1")
    lengths = np.array([len(b) for b in buffers])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    states = np.concatenate([b.features for b in buffers])
    rewards = np.concatenate([b.rewards() for b in buffers])
    actions = np.concatenate([b.actions() for b in buffers])
    t = np.concatenate([np.arange(n) for n in lengths])
    last = np.repeat(offsets + lengths - 1, lengths)
    pos = np.arange(len(t))
    ret = np.zeros(len(t))
    for k in range(n_step):
        idx = pos + k
        ok = idx <= last
        ret[ok] += gamma**k * rewards[idx[ok]]
    boot = np.where(pos + n_step <= last, pos + n_step, -1)
    terminal = actions == int(Action.STOP)
    return TransitionBatch(states, t, actions, rewards, terminal, ret, boot,
                           np.full(len(t), gamma**n_step), buffers[0].horizon)


# ---------------------------------------------------------------- exploration

@dataclass(frozen=True)
class ExplorationSchedule:
    """Probability of a random episode: fast exponential decay, then slow.

    ``eps_start -> eps_mid`` over the first ``fast_fraction`` of the run,
    then ``eps_mid -> eps_final`` over the remainder.
    """

    total: int
    eps_start: float = 1.0
    eps_mid: float = 0.1
    eps_final: float = 0.01
    fast_fraction: float = 0.2

    def __call__(self, i: int) -> float:
        last = max(self.total - 1, 1)
        i = min(max(i, 0), last)
        knee = self.fast_fraction * last
        if knee > 0 and i <= knee:
            return self.eps_start * (self.eps_mid / self.eps_start) ** (i / knee)
        frac = (i - knee) / (last - knee)
        return self.eps_mid * (self.eps_final / self.eps_mid) ** frac


# ---------------------------------------------------------------- agents

def blend(target: Sequence[np.ndarray], source: Sequence[np.ndarray], tau: float) -> None:
    """Soft update ``target <- tau * source + (1 - tau) * target`` in place."""
    for phi, theta in zip(target, source):
        phi *= 1.0 - tau
        phi += tau * theta


def copy_into(target: Sequence[np.ndarray], source: Sequence[np.ndarray]) -> None:
    for phi, theta in zip(target, source):
        phi[...] = theta


class Agent:
    """Value-based stopping agent with a primary and a target model.

    Subclasses provide ``_build(rng)`` returning a fresh model,
    ``q_values(features, target=False)`` and ``learn(batch, rng)``.
    Action columns are ``[Continue, Stop]``.
    """

    algorithm = ""
    label = ""

    def __init__(self, cfg: AgentConfig, spec: PayoutSpec, scaler: Optional[Standardize] = None,
                 seed: int = 0):
        self.cfg, self.spec = cfg, spec
        self.gamma = cfg.gamma if cfg.gamma is not None else (1.0 if cfg.pre_discounted else spec.discount)
        rng = np.random.default_rng(seed)
        if scaler is None:
            scaler = Standardize(np.zeros(spec.n_features), np.ones(spec.n_features))
        self.scaler = scaler
        self.online = self._build(rng)
        self.target = self._build(rng)
        copy_into(self.target.parameters(), self.online.parameters())
        self.adam = AdamState(lr=cfg.lr)
        self.episodes = 0
        self.updates = 0

    def _build(self, rng):
        raise NotImplementedError

    def q_values(self, features: np.ndarray, target: bool = False) -> np.ndarray:
        raise NotImplementedError

    def learn(self, batch: TransitionBatch, rng: np.random.Generator) -> float:
        raise NotImplementedError

    # -- acting

    def stop_mask(self, features: np.ndarray) -> np.ndarray:
        """Greedy Stop decisions for states ``(..., L + 2)``; ties continue."""
        shape = features.shape[:-1]
        q = self.q_values(features.reshape(-1, features.shape[-1]))
        stop = q[:, int(Action.STOP)] > q[:, int(Action.CONTINUE)]
        stop = stop.reshape(shape)
        return stop | (features[..., self.spec.window] <= 0)

    def __call__(self, s: StateVector) -> Action:
        return select_action(self, s)

    def stopping_times(self, batch: EpisodeBatch, rng=None) -> np.ndarray:
        """Greedy stopping times, querying the network only for episodes still running."""
        T = batch.spec.horizon
        tau = np.full(len(batch), T)
        alive = np.arange(len(batch))
        for t in range(T):
            if alive.size == 0:
                break
            stop = self.stop_mask(batch.features[alive, t])
            tau[alive[stop]] = t
            alive = alive[~stop]
        return tau

    # -- target network

    def sync_target(self) -> None:
        if self.cfg.sync is SyncMode.SOFT:
            blend(self.target.parameters(), self.online.parameters(), self.cfg.soft_tau)
        elif self.episodes % self.cfg.target_update == 0:
            copy_into(self.target.parameters(), self.online.parameters())

    def admissible_max(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        """``max_a q`` restricted to admissible actions (Stop only at ``t = T``)."""
        return np.where(t >= self.spec.horizon, q[:, int(Action.STOP)], q.max(axis=1))

    def admissible_argmax(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        a = (q[:, int(Action.STOP)] > q[:, int(Action.CONTINUE)]).astype(int)
        return np.where(t >= self.spec.horizon, int(Action.STOP), a)

    # -- persistence

    def networks(self) -> dict:
        return {"online": self.online, "target": self.target}

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"algorithm": self.algorithm, "config": self.cfg.to_dict(),
                "spec": spec_to_dict(self.spec), "episodes": self.episodes}
        meta.update(extra or {})
        save_checkpoint(path, self._export(), meta)

    def _export(self) -> dict:
        return {"online": self.online, "target": self.target}

    def _import(self, nets: dict) -> None:
        self.online, self.target = nets["online"], nets["target"]


def spec_to_dict(spec: PayoutSpec) -> dict:
    d = asdict(spec)
    d["kind"] = spec.kind.value
    d["strike_at"] = spec.strike_at.value
    return d


def select_action(agent: Agent, s: StateVector) -> Action:
    """Greedy action; Stop is forced at the horizon and ties go to Continue."""
    if s.remaining <= 0 or s.t >= agent.spec.horizon:
        return Action.STOP
    q = agent.q_values(np.asarray(s.features, dtype=float)[None])[0]
    return Action.STOP if q[int(Action.STOP)] > q[int(Action.CONTINUE)] else Action.CONTINUE


def run_episode(agent: Agent, ep: Episode, epsilon: float, rng: np.random.Generator) -> EpisodeBuffer:
    """Roll out one episode; with probability ``epsilon`` it stops on a uniform random day."""
    T = ep.horizon
    if rng.random() < epsilon:
        tau, random = int(rng.integers(T + 1)), True
    else:
        stop = agent.stop_mask(ep.features)
        stop[-1] = True
        tau, random = int(stop.argmax()), False
    r = ep.rewards()[tau]
    if agent.cfg.pre_discounted:
        r = ep.spec.discount**tau * r
    r *= agent.cfg.reward_scale
    return EpisodeBuffer(np.array(ep.features[:tau + 1]), float(r), T, random)


def train_step(agent: Agent, mem: ReplayMemory, rng: np.random.Generator) -> float:
    """Sample buffers, take one optimiser step on the primary model, sync the target."""
    if len(mem) == 0:
        return 0.0
    buffers = mem.sample(agent.cfg.batch_size, rng)
    n_step = agent.cfg.n_step if agent.algorithm == "ddqn" else 1
    batch = build_transitions(buffers, agent.gamma, n_step)
    loss = agent.learn(batch, rng)
    agent.updates += 1
    agent.sync_target()
    return loss


# ---------------------------------------------------------------- training loop

LOG_FIELDS = ("episode", "epsilon", "loss", "eval_er")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else repr(r[k])) for k in LOG_FIELDS})


class _BatchSource:
    def __init__(self, batch: EpisodeBatch, shuffle: bool):
        self.batch, self.shuffle, self._i = batch, shuffle, 0

    def __len__(self):
        return len(self.batch)

    def sample(self, rng):
        if self.shuffle:
            return self.batch.episode(int(rng.integers(len(self.batch))))
        ep = self.batch.episode(self._i)
        self._i = (self._i + 1) % len(self.batch)
        return ep


def fit_scaler(source: Union[Dataset, EpisodeBatch], spec: PayoutSpec, rng, n: int = 2000) -> Standardize:
    if isinstance(source, EpisodeBatch):
        idx = rng.choice(len(source), size=min(n, len(source)), replace=False)
        feats = source.features[idx].reshape(-1, spec.n_features)
    else:
        sampler = EpisodeSampler(source, spec, shuffle=True)
        feats = np.concatenate([sampler.sample(rng).features for _ in range(min(n, len(sampler)))])
    return Standardize.fit(feats)


def train(agent: Agent, source: Union[Dataset, EpisodeBatch], episodes: int, seed: int = 0,
          eval_episodes: Optional[EpisodeBatch] = None, eval_every: int = 0,
          log_path=None, checkpoint_dir=None, checkpoint_every: int = 0) -> TrainingLog:
    """Run the episodic training loop for up to ``episodes`` episodes.

    The run is capped at ``cfg.epochs`` passes over the episode source.
    ``eval_er`` is filled every ``eval_every`` episodes (and at the end) with
    the greedy expected reward on ``eval_episodes``.
    """
    from ..eval import evaluate

    cfg = agent.cfg
    rng = np.random.default_rng(seed)
    if isinstance(source, EpisodeBatch):
        sampler = _BatchSource(source, cfg.shuffle)
    else:
        sampler = EpisodeSampler(source, agent.spec, shuffle=cfg.shuffle)
    episodes = min(episodes, cfg.epochs * len(sampler))
    sched = ExplorationSchedule(episodes, cfg.eps_start, cfg.eps_mid, cfg.eps_final, cfg.eps_fast_fraction)
    mem = ReplayMemory(cfg.capacity)
    out = TrainingLog()
    for i in range(episodes):
        eps = sched(i)
        ep = sampler.sample(rng)
        mem.add(run_episode(agent, ep, eps, rng))
        agent.episodes += 1
        loss = train_step(agent, mem, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at episode {i + 1}")
        er = None
        if eval_episodes is not None and ((eval_every and (i + 1) % eval_every == 0) or i + 1 == episodes):
            er = evaluate(agent, eval_episodes).er
        out.append(episode=i + 1, epsilon=eps, loss=loss, eval_er=er)
        if checkpoint_dir is not None and checkpoint_every and (i + 1) % checkpoint_every == 0:
            agent.save(Path(checkpoint_dir) / f"{agent.algorithm}-{i + 1:07d}.json")
    if log_path is not None:
        out.write_csv(log_path)
    return out
