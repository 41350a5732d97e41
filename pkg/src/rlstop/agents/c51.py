"""Categorical distributional agent (C51) for stopping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Action
from ..nn import adam_step, mlp, softmax, softmax_cross_entropy
from .common import Agent, TransitionBatch


@dataclass(frozen=True)
class CategoricalSupport:
    v_min: float = 0.0
    v_max: float = 1.0
    n_atoms: int = 51

    def __post_init__(self):
        if not self.v_min < self.v_max or self.n_atoms < 2:
            raise ValueError("support needs v_min < v_max and at least two atoms")

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + np.arange(self.n_atoms) * self.delta


def c51_project(r, gamma: float, next_probs, support: CategoricalSupport, terminal=False) -> np.ndarray:
    """Project ``r + gamma * Z'`` onto the fixed atoms.

    Vectorised over a leading batch axis: ``r`` and ``terminal`` have shape
    ``(B,)`` and ``next_probs`` ``(B, N)``; scalars and a single ``(N,)``
    vector are accepted too.  Terminal rows put all mass at ``clamp(r)``.
    """
    p = np.asarray(next_probs, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    B, N = p.shape
    if N != support.n_atoms:
        raise ValueError(f"next_probs has {N} atoms, support has {support.n_atoms}")
    r = np.broadcast_to(np.asarray(r, dtype=float), (B,))
    term = np.broadcast_to(np.asarray(terminal, dtype=bool), (B,))
    z = support.atoms
    grow = np.where(term, 0.0, gamma)
    v = np.clip(r[:, None] + grow[:, None] * z[None, :], support.v_min, support.v_max)
    # a terminal row carries one unit of mass at clamp(r)
    w = np.where(term[:, None], np.eye(1, N, 0).ravel()[None, :], p)
    b = (v - support.v_min) / support.delta
    b = np.clip(b, 0.0, N - 1)
    lo = np.floor(b).astype(int)
    hi = np.ceil(b).astype(int)
    m = np.zeros((B, N))
    rows = np.repeat(np.arange(B), N)
    same = lo == hi
    np.add.at(m, (rows, lo.ravel()), (w * np.where(same, 1.0, hi - b)).ravel())
    np.add.at(m, (rows, hi.ravel()), (w * np.where(same, 0.0, b - lo)).ravel())
    return m[0] if single else m


class C51Agent(Agent):
    algorithm = "c51"
    label = "C51"

    @property
    def support(self) -> CategoricalSupport:
        k = self.cfg.reward_scale
        return CategoricalSupport(k * self.cfg.v_min, k * self.cfg.v_max, self.cfg.n_atoms)

    def _build(self, rng):
        sizes = (self.spec.n_features, *self.cfg.hidden, 2 * self.cfg.n_atoms)
        return mlp(sizes, rng, self.cfg.dropout, self.scaler, self.cfg.out_init_scale)

    def _logits(self, net, x, rng=None):
        return net.forward(x, rng).reshape(len(x), 2, self.cfg.n_atoms)

    def probs(self, features, target=False):
        net = self.target if target else self.online
        net.train = False
        return softmax(self._logits(net, features))

    def q_values(self, features, target=False):
        return self.probs(features, target) @ self.support.atoms

    def learn(self, batch: TransitionBatch, rng) -> float:
        sup = self.support
        n = len(batch)
        next_p = np.zeros((n, sup.n_atoms))
        next_p[:, 0] = 1.0
        rows = batch.boot_rows
        if rows.size:
            P = self.probs(batch.states[batch.boot[rows]], target=True)
            q = P @ sup.atoms
            a = self.admissible_argmax(q, batch.t[batch.boot[rows]])
            next_p[rows] = P[np.arange(rows.size), a]
        terminal = batch.boot < 0
        m = c51_project(batch.ret, batch.boot_discount[0] if n else self.gamma, next_p, sup, terminal)

        net = self.online
        net.train = True
        logits = self._logits(net, batch.states, rng)
        taken = logits[np.arange(n), batch.actions]
        loss, g = softmax_cross_entropy(taken, m)
        gl = np.zeros_like(logits)
        gl[np.arange(n), batch.actions] = g / n
        net.backward(gl.reshape(n, -1))
        net.train = False
        adam_step(net.parameters(), net.gradients(), self.adam)
        return float(loss.mean())
