"""Policy evaluation and the Training / Valid_HP / Valid_Model / Test protocol."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .baselines import FirstPolicy, LastPolicy, RandPolicy, TreePolicy, bermudan_batch
from .core import Episode, PayoutKind, stopping_time
from .market import Dataset, EpisodeBatch, Split, enumerate_episodes

log = logging.getLogger(__name__)

Z90 = 1.645
PRICE_FLOOR = 1e-6
COLUMN_ORDER = ("DDQN", "C51", "IQN", "Rand", "Last", "First", "B.M.")
ALGO_ORDER = ("ddqn", "c51", "iqn")


@dataclass(frozen=True)
class EvalReport:
    label: str
    n_episodes: int
    er: float
    erop: float
    eor: float
    ci90_er: float
    ci90_erop: float
    ci90_eor: float
    n_eor_excluded: int = 0
    mean_tau: float = float("nan")
    degenerate_ci: bool = False

    def as_row(self) -> dict:
        return {
            "policy": self.label, "n_episodes": self.n_episodes,
            "er": self.er, "ci90_er": self.ci90_er,
            "erop": self.erop, "ci90_erop": self.ci90_erop,
            "eor": self.eor, "ci90_eor": self.ci90_eor,
            "n_eor_excluded": self.n_eor_excluded, "mean_tau": self.mean_tau,
        }


def ci90(x: np.ndarray) -> float:
    """Half-width of the 90% normal interval of the mean (0 for one sample)."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 0.0
    return float(Z90 * x.std(ddof=1) / math.sqrt(x.size))


def option_return(payout, price):
    """``(payout - price) / price``."""
    price = np.asarray(price, dtype=float)
    if np.any(price <= 0):
        raise ValueError("price must be positive")
    out = (np.asarray(payout, dtype=float) - price) / price
    return float(out) if out.ndim == 0 else out


def calibrated_prices(batch: EpisodeBatch, dt: float = 1 / 252) -> np.ndarray:
    """Bermudan CRR price at step 0 of each episode, volatility calibrated on its window.

    Prices are in payout units (divided by the reference price for the
    relative put).
    """
    spec = batch.spec
    r = -math.log(spec.discount) / dt if spec.discount > 0 else 0.0
    L = spec.window
    W = spec.warmup
    pad = max(0, L - 1 - W)
    sl = np.concatenate([np.repeat(batch.slices[:, :1], pad, axis=1), batch.slices], axis=1)
    window = sl[:, W + pad - (L - 1):W + pad + 1]
    rets = np.diff(np.log(window), axis=1)
    sig = rets.std(axis=1, ddof=1) / math.sqrt(dt) if rets.shape[1] > 1 else np.zeros(len(batch))
    S = batch.prices[:, 0]
    K = batch.strike
    kind = PayoutKind.CALL if spec.kind is PayoutKind.CALL else PayoutKind.PUT
    price, _ = bermudan_batch(S, K, sig, r, dt, spec.horizon, kind)
    if spec.kind is PayoutKind.RELATIVE_PUT:
        price = price / batch.reference
    return price


def _as_batches(episodes) -> list[EpisodeBatch]:
    if isinstance(episodes, EpisodeBatch):
        return [episodes]
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to evaluate")
    if isinstance(episodes[0], EpisodeBatch):
        return episodes
    return [EpisodeBatch.from_episodes(episodes)]


def policy_stopping_times(policy, batch: EpisodeBatch, rng=None) -> np.ndarray:
    """Stopping times via the vectorised path when the policy offers one."""
    if hasattr(policy, "stopping_times"):
        return np.asarray(policy.stopping_times(batch, rng), dtype=int)
    out = np.empty(len(batch), dtype=int)
    for i, ep in enumerate(batch):
        if hasattr(policy, "begin_episode"):
            policy.begin_episode(ep.horizon)
        out[i] = stopping_time(policy, ep)
    return out


def evaluate(policy, episodes: Union[EpisodeBatch, Sequence[Episode], Iterable[EpisodeBatch]],
             label: Optional[str] = None, rng=None, with_eor: bool = False, dt: float = 1 / 252,
             return_details: bool = False):
    """Expected discounted reward and companions of a policy over an episode set.

    The policy never explores here: agents act greedily from their primary
    network.  EOR needs a model price per episode and is only computed with
    ``with_eor``; episodes whose price falls below ``PRICE_FLOOR`` are left
    out of the EOR mean and counted.
    """
    batches = _as_batches(episodes)
    ret, rel, eor, taus, excluded = [], [], [], [], 0
    for b in batches:
        tau = policy_stopping_times(policy, b, rng)
        if np.any(tau < 0) or np.any(tau > b.spec.horizon):
            raise ValueError("stopping time outside [0, T]")
        r = b.discounted_rewards()[np.arange(len(b)), tau]
        ret.append(r)
        taus.append(tau)
        rel.append(r if b.spec.kind is PayoutKind.RELATIVE_PUT else r / b.reference)
        if with_eor:
            price = calibrated_prices(b, dt)
            ok = price > PRICE_FLOOR
            excluded += int((~ok).sum())
            eor.append((r[ok] - price[ok]) / price[ok])
    ret, rel, taus = np.concatenate(ret), np.concatenate(rel), np.concatenate(taus)
    eor = np.concatenate(eor) if eor else np.array([])
    n = ret.size
    report = EvalReport(
        label=label or getattr(policy, "label", type(policy).__name__),
        n_episodes=n,
        er=float(ret.mean()), erop=float(rel.mean()),
        eor=float(eor.mean()) if eor.size else float("nan"),
        ci90_er=ci90(ret), ci90_erop=ci90(rel),
        ci90_eor=ci90(eor) if eor.size else float("nan"),
        n_eor_excluded=excluded, mean_tau=float(taus.mean()), degenerate_ci=n < 2,
    )
    if return_details:
        return report, {"returns": ret, "relative": rel, "tau": taus, "eor": eor}
    return report


def clairvoyant_returns(episodes) -> np.ndarray:
    """Per-episode ``max_t beta^t g_t``: an upper bound for every policy."""
    return np.concatenate([b.discounted_rewards().max(axis=1) for b in _as_batches(episodes)])


# ---------------------------------------------------------------- protocol

class LeakError(ValueError):
    pass


def _ranges(ds: Dataset) -> dict:
    out = {}
    for tr in ds:
        if tr.timestamps is not None:
            lo, hi = tr.timestamps[0], tr.timestamps[-1]
        else:
            lo, hi = 0, len(tr) - 1
        out.setdefault(tr.id, []).append((lo, hi, tr))
    return out


def check_disjoint(datasets: dict) -> None:
    """Reject splits that share a trajectory id over overlapping date ranges.

    Undated trajectories under the same id are compared by content instead,
    so independently simulated paths never collide.
    """
    names = list(datasets)
    ranges = {k: _ranges(v) for k, v in datasets.items()}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for tid in set(ranges[a]) & set(ranges[b]):
                for lo1, hi1, t1 in ranges[a][tid]:
                    for lo2, hi2, t2 in ranges[b][tid]:
                        if t1.timestamps is None and t2.timestamps is None:
                            clash = np.array_equal(t1.prices, t2.prices)
                        else:
                            clash = lo1 <= hi2 and lo2 <= hi1
                        if clash:
                            raise LeakError(f"splits {a} and {b} overlap on {tid!r} ({lo1}..{hi1} vs {lo2}..{hi2})")


@dataclass
class ProtocolReport:
    tables: dict = field(default_factory=dict)
    selected: Optional[str] = None
    hyperparameters: dict = field(default_factory=dict)
    train_seconds: dict = field(default_factory=dict)
    agents: dict = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "policy", "n_episodes", "er", "ci90_er", "erop", "ci90_erop",
                    "eor", "ci90_eor", "n_eor_excluded", "mean_tau"])
        for split, reports in self.tables.items():
            for label in _ordered(reports):
                r = reports[label]
                w.writerow([split, r.label, r.n_episodes] + [
                    repr(float(x)) for x in (r.er, r.ci90_er, r.erop, r.ci90_erop, r.eor, r.ci90_eor)
                ] + [r.n_eor_excluded, repr(float(r.mean_tau))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for split, reports in self.tables.items():
            labels = _ordered(reports)
            lines.append(f"== {split}")
            lines.append(f"{'':10s}" + "".join(f"{l:>10s}" for l in labels))
            rows = [("ER/EROP", "erop"), ("ER", "er"), ("CI", "ci90_er"),
                    ("EOR", "eor"), ("EOR CI", "ci90_eor")]
            for title, attr in rows:
                vals = [getattr(reports[l], attr) for l in labels]
                if all(isinstance(v, float) and math.isnan(v) for v in vals):
                    continue
                if attr.startswith("eor") or attr == "ci90_eor":
                    cells = "".join(f"{100 * v:>9.1f}%" for v in vals)
                else:
                    cells = "".join(f"{v:>10.4f}" for v in vals)
                lines.append(f"{title:10s}" + cells)
        if self.selected:
            lines.append(f"selected on valid_model: {self.selected}")
        return "\n".join(lines) + "\n"


def _ordered(reports: dict) -> list[str]:
    return [c for c in COLUMN_ORDER if c in reports] + sorted(set(reports) - set(COLUMN_ORDER))


def _episodes_of(data, spec) -> EpisodeBatch:
    return data if isinstance(data, EpisodeBatch) else enumerate_episodes(data, spec)


def select_best(scores: dict) -> Optional[str]:
    """Algorithm with the highest score; ties go to the earlier of DDQN, C51, IQN."""
    chosen = None
    for algo in ALGO_ORDER:
        if algo in scores and (chosen is None or scores[algo] > scores[chosen]):
            chosen = algo
    return chosen


def run_protocol(candidates: dict, datasets: dict, spec, seed: int = 0, episodes: int = 10000,
                 tree_sigma: Optional[float] = None, with_eor: bool = False, dt: float = 1 / 252,
                 train_source=None, progress=None) -> ProtocolReport:
    """Train, select and test agents against the benchmarks.

    ``candidates`` maps an algorithm name to a list of
    :class:`~rlstop.agents.AgentConfig` (hyper-parameter grid).  Each
    candidate is trained on Training and scored on Valid_HP; the best per
    algorithm goes to Valid_Model, where one agent is selected (ties follow
    DDQN < C51 < IQN) and then reported on Test beside all baselines.
    ``datasets`` maps :class:`Split` to a Dataset or pre-built EpisodeBatch.
    """
    from .agents import fit_scaler, make_agent, train

    datasets = {Split(k): v for k, v in datasets.items()}
    missing = set(Split) - set(datasets)
    if missing:
        raise ValueError(f"missing splits: {sorted(s.value for s in missing)}")
    raw = {k: v for k, v in datasets.items() if isinstance(v, Dataset)}
    if raw:
        check_disjoint({k.value: v for k, v in raw.items()})
    eps = {k: _episodes_of(v, spec) for k, v in datasets.items()}
    train_src = train_source if train_source is not None else datasets[Split.TRAINING]

    baselines = [RandPolicy(seed), LastPolicy(), FirstPolicy(), TreePolicy(spec, tree_sigma, dt)]
    report = ProtocolReport()

    def score(policy, split, label=None):
        rng = np.random.default_rng([seed, list(Split).index(split)])
        return evaluate(policy, eps[split], label=label, rng=rng,
                        with_eor=with_eor and split is Split.TEST, dt=dt)

    best: dict = {}
    for algo in [a for a in ALGO_ORDER if a in candidates]:
        for k, cfg in enumerate(candidates[algo]):
            scaler = fit_scaler(train_src, spec, np.random.default_rng(seed))
            agent = make_agent(cfg, spec, scaler, seed=seed + k)
            t0 = time.perf_counter()
            train(agent, train_src, episodes, seed=seed + k)
            elapsed = time.perf_counter() - t0
            hp = score(agent, Split.VALID_HP)
            if progress:
                progress(f"{algo}[{k}] valid_hp ER={hp.er:.5f} ({elapsed:.1f}s)")
            if algo not in best or hp.er > best[algo][1].er:
                best[algo] = (agent, hp, k, elapsed)
        report.hyperparameters[algo] = candidates[algo][best[algo][2]].to_dict()
        report.train_seconds[algo] = best[algo][3]

    for split in (Split.TRAINING, Split.VALID_HP, Split.VALID_MODEL):
        table = {}
        for algo, (agent, hp, _, _) in best.items():
            table[agent.label] = hp if split is Split.VALID_HP else score(agent, split)
        for pol in baselines:
            table[pol.label] = score(pol, split)
        report.tables[split.value] = table

    vm = report.tables[Split.VALID_MODEL.value]
    chosen = select_best({algo: vm[v[0].label].er for algo, v in best.items()})
    test = {}
    if chosen is not None:
        agent = best[chosen][0]
        report.selected = agent.label
        test[agent.label] = score(agent, Split.TEST)
    for pol in baselines:
        test[pol.label] = score(pol, Split.TEST)
    report.tables[Split.TEST.value] = test
    report.agents = {algo: v[0] for algo, v in best.items()}
    return report
