"""Price trajectories and episodes.

GBM paths are generated from a counter-based generator (Philox keyed by
``(seed, path index)``) pushed through the inverse normal CDF, so any single
path can be regenerated without replaying the others.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .core import Episode, PayoutKind, PayoutSpec, StrikeAt, Trajectory, _raw_payout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GbmParams:
    S0: float = 1.0
    r: float = 0.05
    sigma: float = 0.20
    dt: float = 1 / 252
    n_steps: int = 38

    def __post_init__(self):
        if not self.S0 > 0:
            raise ValueError("S0 must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @property
    def drift(self) -> float:
        return (self.r - 0.5 * self.sigma**2) * self.dt

    @property
    def vol(self) -> float:
        return self.sigma * math.sqrt(self.dt)


def gbm_step(S_prev, p: GbmParams, eps):
    """One risk-neutral GBM step: ``S_prev * exp((r - sigma^2/2) dt + sigma sqrt(dt) eps)``."""
    if np.any(np.asarray(S_prev) <= 0):
        raise ValueError("S_prev must be positive")
    return S_prev * np.exp(p.drift + p.vol * np.asarray(eps, dtype=float))


def normal_draws(seed: int, path: int, n: int) -> np.ndarray:
    """``n`` standard normals for one path; depends only on (seed, path)."""
    key = ((int(seed) & (2**64 - 1)) << 64) | (int(path) & (2**64 - 1))
    gen = np.random.Generator(np.random.Philox(key=key))
    u = (gen.integers(0, 2**53, size=n, dtype=np.uint64) + 0.5) / 2.0**53
    return ndtri(u)


def gbm_paths(p: GbmParams, seed: int, n_paths: int, anchor: int = 0, first_path: int = 0) -> np.ndarray:
    """Price paths of shape ``(n_paths, n_steps + 1)`` with ``S0`` at index ``anchor``.

    Increment ``j`` (from index ``j-1`` to ``j``) uses draw ``j-1`` of the
    path's stream regardless of ``anchor``; indices before the anchor are
    obtained by dividing out the increments.
    """
    if not 0 <= anchor <= p.n_steps:
        raise ValueError(f"anchor {anchor} outside [0, {p.n_steps}]")
    n = p.n_steps
    eps = np.empty((n_paths, n))
    for i in range(n_paths):
        eps[i] = normal_draws(seed, first_path + i, n)
    factors = np.exp(p.drift + p.vol * eps)
    out = np.empty((n_paths, n + 1))
    out[:, anchor] = p.S0
    if anchor < n:
        out[:, anchor:] = np.cumprod(
            np.concatenate([out[:, anchor:anchor + 1], factors[:, anchor:]], axis=1), axis=1
        )
    for j in range(anchor - 1, -1, -1):
        out[:, j] = out[:, j + 1] / factors[:, j]
    return out


def simulate_gbm(p: GbmParams, seed: int, path: int = 0, anchor: int = 0) -> Trajectory:
    prices = gbm_paths(p, seed, 1, anchor=anchor, first_path=path)[0]
    return Trajectory(id=f"gbm-{seed}-{path}", prices=prices)


class Split(str, enum.Enum):
    TRAINING = "training"
    VALID_HP = "valid_hp"
    VALID_MODEL = "valid_model"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple
    split: Split = Split.TRAINING

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "split", Split(self.split))
        if not self.trajectories:
            raise ValueError("dataset is empty")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def usable(self, spec: PayoutSpec) -> "Dataset":
        """Drop trajectories too short for a single episode, with a warning."""
        keep = [tr for tr in self.trajectories if len(tr) >= spec.slice_length]
        if len(keep) < len(self.trajectories):
            short = [tr.id for tr in self.trajectories if len(tr) < spec.slice_length]
            log.warning("excluding %d short trajectories: %s", len(short), ", ".join(short))
        return Dataset(keep, self.split)


def gbm_dataset(p: GbmParams, seed: int, n_paths: int, split=Split.TRAINING, anchor: int = 0) -> Dataset:
    paths = gbm_paths(p, seed, n_paths, anchor=anchor)
    return Dataset([Trajectory(f"gbm-{seed}-{i}", row) for i, row in enumerate(paths)], split)


# ---------------------------------------------------------------- CSV

class CsvError(ValueError):
    pass


def _parse_price(text: str, path, lineno: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise CsvError(f"{path}:{lineno}: cannot parse price {text!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise CsvError(f"{path}:{lineno}: price must be positive, got {text!r}")
    return value


def _parse_date(text: str, path, lineno: int) -> str:
    try:
        return date.fromisoformat(text.strip()).isoformat()
    except ValueError:
        raise CsvError(f"{path}:{lineno}: bad ISO-8601 date {text!r}") from None


def load_csv(paths, split=Split.TRAINING, min_length: int = 1) -> Dataset:
    """Read one or more CSV files into a dataset (one trajectory per symbol).

    Two layouts are accepted: long ``symbol,date,close`` and wide
    ``date,<symbol>`` (the symbol is the second header).  Rows are sorted
    by date; series shorter than ``min_length`` are dropped with a warning.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    series: dict[str, dict[str, float]] = {}
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                raw_header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise CsvError(f"{path}: empty file") from None
            header = [h.lower() for h in raw_header]
            if header[:3] == ["symbol", "date", "close"]:
                wide_symbol = None
            elif len(header) == 2 and header[0] == "date":
                wide_symbol = raw_header[1]
            else:
                raise CsvError(f"{path}:1: unrecognised header {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if wide_symbol is None:
                    if len(row) != 3:
                        raise CsvError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                    symbol, d, price = row[0].strip(), row[1], row[2]
                else:
                    if len(row) != 2:
                        raise CsvError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
                    symbol, d, price = wide_symbol, row[0], row[1]
                if not symbol:
                    raise CsvError(f"{path}:{lineno}: missing symbol")
                d = _parse_date(d, path, lineno)
                rows = series.setdefault(symbol, {})
                if d in rows:
                    raise CsvError(f"{path}:{lineno}: duplicate date {d} for {symbol}")
                rows[d] = _parse_price(price, path, lineno)
    trajectories = []
    for symbol in sorted(series):
        rows = series[symbol]
        if len(rows) < min_length:
            log.warning("excluding %s: %d rows < %d", symbol, len(rows), min_length)
            continue
        dates = sorted(rows)
        trajectories.append(Trajectory(symbol, np.array([rows[d] for d in dates]), dates))
    return Dataset(trajectories, split)


SYNTHETIC_EPOCH = "2000-01-03"


def business_days(n: int, start: str = SYNTHETIC_EPOCH) -> list[str]:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return [str(d) for d in days]


def write_csv(trajectories: Iterable[Trajectory], path) -> None:
    """Write trajectories in the long ``symbol,date,close`` layout.

    Trajectories without timestamps are given consecutive business days
    starting on ``SYNTHETIC_EPOCH``.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["symbol", "date", "close"])
        for tr in trajectories:
            stamps = tr.timestamps if tr.timestamps is not None else business_days(len(tr))
            for d, price in zip(stamps, tr.prices):
                w.writerow([tr.id, d, repr(float(price))])


# ---------------------------------------------------------------- episodes

def _strike_reference(slices: np.ndarray, spec: PayoutSpec):
    pos = spec.warmup if spec.strike_at is StrikeAt.DECISION_START else 0
    anchor = slices[:, pos]
    if spec.kind is PayoutKind.RELATIVE_PUT or spec.strike is None:
        strike = anchor.copy()
    else:
        strike = np.full(len(slices), float(spec.strike))
    return strike, anchor


def featurize(slices: np.ndarray, spec: PayoutSpec, strike: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Feature tensor of shape ``(n, T + 1, L + 2)`` for price slices ``(n, W + T + 1)``.

    Row ``t`` holds the last ``L`` prices up to decision step ``t``, the
    remaining time ``T - t`` and the moneyness
    ``beta^t * max(K - S, 0) - max(S - K, 0)`` (sign-flipped for calls).
    Windows reaching before the slice start are padded with its first price.
    """
    W, T, L = spec.warmup, spec.horizon, spec.window
    n = slices.shape[0]
    pad = max(0, L - 1 - W)
    padded = np.concatenate([np.repeat(slices[:, :1], pad, axis=1), slices], axis=1)
    first = W + pad - (L - 1)
    windows = np.lib.stride_tricks.sliding_window_view(padded, L, axis=1)[:, first:first + T + 1]
    S = slices[:, W:]
    t = np.arange(T + 1)
    K = strike[:, None]
    if spec.kind is PayoutKind.CALL:
        itm, otm = np.maximum(S - K, 0.0), np.maximum(K - S, 0.0)
    else:
        itm, otm = np.maximum(K - S, 0.0), np.maximum(S - K, 0.0)
    money = spec.discount**t * itm - otm
    feats = np.empty((n, T + 1, L + 2))
    feats[:, :, :L] = windows
    feats[:, :, L] = T - t
    feats[:, :, L + 1] = money
    if spec.rescale:
        feats[:, :, :L] /= reference[:, None, None]
        feats[:, :, L + 1] /= reference[:, None]
    return feats


def admissible_starts(traj: Trajectory, spec: PayoutSpec) -> range:
    """Decision-day indices ``start`` with ``start - W >= 0`` and ``start + T < len``."""
    return range(spec.warmup, len(traj) - spec.horizon)


def make_episode(traj: Trajectory, start: int, spec: PayoutSpec) -> Episode:
    """Episode whose decision step 0 is ``traj.prices[start]``.

    Only ``prices[start - W : start + T + 1]`` is read.
    """
    if start not in admissible_starts(traj, spec):
        raise IndexError(
            f"start {start} inadmissible for trajectory {traj.id!r} of length {len(traj)}"
        )
    sl = np.array(traj.prices[start - spec.warmup:start + spec.horizon + 1])
    strike, ref = _strike_reference(sl[None], spec)
    feats = featurize(sl[None], spec, strike, ref)[0]
    for a in (sl, feats):
        a.setflags(write=False)
    return Episode(sl, float(strike[0]), float(ref[0]), feats, spec, (traj.id, start))


@dataclass(frozen=True)
class EpisodeBatch:
    """Stacked episodes sharing one payout spec (the vectorised path)."""

    slices: np.ndarray
    strike: np.ndarray
    reference: np.ndarray
    features: np.ndarray
    spec: PayoutSpec
    sources: Optional[tuple] = None

    @classmethod
    def from_slices(cls, slices: np.ndarray, spec: PayoutSpec, sources=None) -> "EpisodeBatch":
        slices = np.asarray(slices, dtype=float)
        if slices.ndim != 2 or slices.shape[1] != spec.slice_length:
            raise ValueError(f"slices must have shape (n, {spec.slice_length})")
        strike, ref = _strike_reference(slices, spec)
        return cls(slices, strike, ref, featurize(slices, spec, strike, ref), spec, sources)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise ValueError("no episodes")
        spec = episodes[0].spec
        return cls(
            np.stack([e.slice for e in episodes]),
            np.array([e.strike for e in episodes]),
            np.array([e.reference for e in episodes]),
            np.stack([e.features for e in episodes]),
            spec,
            tuple(e.source for e in episodes),
        )

    def __len__(self):
        return self.slices.shape[0]

    @property
    def prices(self) -> np.ndarray:
        return self.slices[:, self.spec.warmup:]

    def rewards(self) -> np.ndarray:
        """Undiscounted payouts ``(n, T + 1)``."""
        return _raw_payout(self.spec.kind, self.prices, self.reference[:, None], self.strike[:, None])

    def discounted_rewards(self) -> np.ndarray:
        return self.spec.discount ** np.arange(self.spec.horizon + 1) * self.rewards()

    def episode(self, i: int) -> Episode:
        src = self.sources[i] if self.sources is not None else ("", i)
        return Episode(self.slices[i], float(self.strike[i]), float(self.reference[i]),
                       self.features[i], self.spec, src)

    def __iter__(self) -> Iterator[Episode]:
        return (self.episode(i) for i in range(len(self)))

    def take(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx)
        src = tuple(self.sources[i] for i in idx) if self.sources is not None else None
        return EpisodeBatch(self.slices[idx], self.strike[idx], self.reference[idx],
                            self.features[idx], self.spec, src)


def gbm_episodes(p: GbmParams, spec: PayoutSpec, n: int, seed: int, first_path: int = 0) -> EpisodeBatch:
    """``n`` fresh GBM episodes, each simulated so the strike anchor sits at ``S0``."""
    q = GbmParams(p.S0, p.r, p.sigma, p.dt, spec.slice_length - 1)
    anchor = spec.warmup if spec.strike_at is StrikeAt.DECISION_START else 0
    slices = gbm_paths(q, seed, n, anchor=anchor, first_path=first_path)
    return EpisodeBatch.from_slices(slices, spec, tuple((f"gbm-{seed}", first_path + i) for i in range(n)))


def enumerate_episodes(ds: Dataset, spec: PayoutSpec, stride: int = 1) -> EpisodeBatch:
    """All sliding-window episodes of a dataset (stride 1 by default)."""
    slices, sources = [], []
    for tr in ds:
        for start in admissible_starts(tr, spec)[::stride]:
            slices.append(tr.prices[start - spec.warmup:start + spec.horizon + 1])
            sources.append((tr.id, start))
    if not slices:
        raise ValueError("no admissible episode in dataset")
    return EpisodeBatch.from_slices(np.array(slices), spec, tuple(sources))


class EpisodeSampler:
    """Draws episodes from a dataset.

    With ``shuffle`` on, each draw is uniform over all admissible
    ``(trajectory, start)`` pairs.  With it off, pairs are served in
    chronological order of start (timestamp when known, else index) and the
    order restarts after a full pass.
    """

    def __init__(self, ds: Dataset, spec: PayoutSpec, shuffle: bool = True):
        self.ds, self.spec, self.shuffle = ds, spec, shuffle
        pairs = [(i, s) for i, tr in enumerate(ds) for s in admissible_starts(tr, spec)]
        if not pairs:
            raise ValueError("no admissible episode in dataset")
        if not shuffle:
            def key(pair):
                tr = ds.trajectories[pair[0]]
                stamp = tr.timestamps[pair[1]] if tr.timestamps is not None else ""
                return (stamp, pair[1], pair[0])
            pairs.sort(key=key)
        self.pairs = pairs
        self._cursor = 0

    def __len__(self):
        return len(self.pairs)

    def next_pair(self, rng: np.random.Generator) -> tuple[int, int]:
        if self.shuffle:
            return self.pairs[int(rng.integers(len(self.pairs)))]
        pair = self.pairs[self._cursor]
        self._cursor = (self._cursor + 1) % len(self.pairs)
        return pair

    def sample(self, rng: np.random.Generator) -> Episode:
        i, start = self.next_pair(rng)
        return make_episode(self.ds.trajectories[i], start, self.spec)


def sample_episode(ds: Dataset, spec: PayoutSpec, rng: np.random.Generator) -> Episode:
    """One episode drawn uniformly over admissible ``(trajectory, start)`` pairs."""
    counts = np.array([len(admissible_starts(tr, spec)) for tr in ds], dtype=float)
    counts = np.maximum(counts, 0)
    total = counts.sum()
    if total == 0:
        raise ValueError("no admissible episode in dataset")
    k = int(rng.integers(int(total)))
    cum = np.cumsum(counts)
    i = int(np.searchsorted(cum, k, side="right"))
    offset = k - (int(cum[i - 1]) if i else 0)
    tr = ds.trajectories[i]
    return make_episode(tr, admissible_starts(tr, spec)[offset], spec)
