"""Double deep Q-learning for stopping, with max-dueling head and n-step targets."""

from __future__ import annotations

import numpy as np

from ..core import Action
from ..nn import adam_step, huber_loss, mlp
from .common import Agent, TransitionBatch


def dueling_combine(V, A):
    """``Q(s, a) = V(s) + A(s, a) - max_a' A(s, a')`` row-wise."""
    V = np.asarray(V, dtype=float)
    A = np.asarray(A, dtype=float)
    return V[..., None] + A - A.max(axis=-1, keepdims=True)


def dueling_backward(A, gQ):
    """Gradients w.r.t. ``(V, A)`` given ``dL/dQ``; the max routes to its first argmax."""
    gV = gQ.sum(axis=-1)
    gA = gQ.copy()
    hot = np.zeros_like(A)
    np.put_along_axis(hot, A.argmax(axis=-1)[..., None], 1.0, axis=-1)
    gA -= gQ.sum(axis=-1, keepdims=True) * hot
    return gV, gA


def ddqn_target(batch: TransitionBatch, q_next_target: np.ndarray, q_next_online=None,
                horizon: int = None) -> np.ndarray:
    """Bootstrapped targets ``y`` for every transition of ``batch``.

    ``q_next_target`` (and ``q_next_online`` for the double estimator) are
    action values at the bootstrap states ``batch.states[batch.boot_rows]``.
    With ``q_next_online=None`` the plain ``max`` over the target values is
    used.  Only Stop is admissible at the horizon.
    """
    T = batch.horizon if horizon is None else horizon
    y = batch.ret.copy()
    rows = batch.boot_rows
    if rows.size == 0:
        return y
    t_next = batch.t[batch.boot[rows]]
    chooser = q_next_target if q_next_online is None else q_next_online
    a = (chooser[:, int(Action.STOP)] > chooser[:, int(Action.CONTINUE)]).astype(int)
    a = np.where(t_next >= T, int(Action.STOP), a)
    value = np.take_along_axis(q_next_target, a[:, None], axis=1)[:, 0]
    y[rows] += batch.boot_discount[rows] * value
    return y


class DDQNAgent(Agent):
    algorithm = "ddqn"
    label = "DDQN"

    def _build(self, rng):
        n_out = 3 if self.cfg.dueling else 2
        sizes = (self.spec.n_features, *self.cfg.hidden, n_out)
        return mlp(sizes, rng, self.cfg.dropout, self.scaler, self.cfg.out_init_scale)

    def _q(self, net, x, rng=None):
        out = net.forward(x, rng)
        if self.cfg.dueling:
            return dueling_combine(out[:, 0], out[:, 1:]), out
        return out, out

    def q_values(self, features, target=False):
        net = self.target if target else self.online
        net.train = False
        return self._q(net, features)[0]

    def learn(self, batch: TransitionBatch, rng) -> float:
        rows = batch.boot_rows
        nxt = batch.states[batch.boot[rows]]
        q_tgt = self.q_values(nxt, target=True)
        q_onl = self.q_values(nxt) if self.cfg.double else None
        y = ddqn_target(batch, q_tgt, q_onl)

        net = self.online
        net.train = True
        q, raw = self._q(net, batch.states, rng)
        pred = q[np.arange(len(batch)), batch.actions]
        loss, g = huber_loss(pred, y, self.cfg.huber_kappa)
        gQ = np.zeros_like(q)
        gQ[np.arange(len(batch)), batch.actions] = g / len(batch)
        if self.cfg.dueling:
            gV, gA = dueling_backward(raw[:, 1:], gQ)
            gQ = np.concatenate([gV[:, None], gA], axis=1)
        net.backward(gQ)
        net.train = False
        adam_step(net.parameters(), net.gradients(), self.adam)
        return float(loss.mean())
