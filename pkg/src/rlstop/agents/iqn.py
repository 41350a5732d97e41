"""Implicit quantile network agent for stopping."""

from __future__ import annotations

import copy

import numpy as np

from ..nn import Dense, Dropout, Network, ReLU, adam_step
from .common import Agent, TransitionBatch


def cosine_features(tau, n_embed: int) -> np.ndarray:
    """``cos(pi * i * tau)`` for ``i = 0..n_embed-1``; shape ``tau.shape + (n_embed,)``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0) or np.any(tau >= 1):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    return np.cos(np.pi * np.arange(n_embed) * tau[..., None])


def iqn_embed(tau, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Quantile embedding ``relu(cos_features(tau) @ W + b)``; ``W`` is ``(n_embed, width)``."""
    return np.maximum(cosine_features(tau, W.shape[0]) @ W + b, 0.0)


def quantile_huber_loss(delta, tau, kappa: float = 1.0, with_grad: bool = False):
    """Quantile regression Huber loss over pairwise TD errors.

    ``delta[..., i, j]`` is target sample ``j`` minus online quantile ``i``
    and ``tau[..., i]`` the online quantile levels.  Returns the mean over
    ``j`` of the sum over ``i``, per leading index; optionally also the
    gradient w.r.t. ``delta``.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    delta = np.asarray(delta, dtype=float)
    tau = np.asarray(tau, dtype=float)[..., None]
    a = np.abs(delta)
    hub = np.where(a <= kappa, 0.5 * delta**2, kappa * (a - 0.5 * kappa))
    w = np.abs(tau - (delta < 0))
    n_target = delta.shape[-1]
    loss = (w * hub / kappa).sum(axis=-2).mean(axis=-1)
    if not with_grad:
        return loss
    grad = w * np.clip(delta, -kappa, kappa) / kappa / n_target
    return loss, grad


class QuantileNetwork:
    """State trunk merged with a cosine quantile embedding by elementwise product."""

    def __init__(self, trunk: Network, embed: Dense, head: Network, n_embed: int):
        self.trunk, self.embed, self.head, self.n_embed = trunk, embed, head, n_embed
        self.relu = ReLU()
        self.train = False

    def forward(self, x, tau, rng=None):
        """Quantile values of shape ``(B, Nq, 2)`` for states ``(B, d)``.

        ``tau`` is ``(B, Nq)``, or ``(Nq,)`` to share one set of levels
        across the batch (inference only: the embedding is computed once).
        """
        for net in (self.trunk, self.head):
            net.train = self.train
        psi = self.trunk.forward(x, rng)
        B = psi.shape[0]
        if tau.ndim == 1:
            Nq = tau.size
            phi = np.maximum(self.embed.forward(cosine_features(tau, self.n_embed)), 0.0)
            merged = (psi[:, None, :] * phi[None, :, :]).reshape(B * Nq, -1)
            self._cache = None
            return self.head.forward(merged, rng).reshape(B, Nq, -1)
        Nq = tau.shape[1]
        cos = cosine_features(tau, self.n_embed).reshape(B * Nq, self.n_embed)
        phi = self.relu.forward(self.embed.forward(cos))
        psi_rep = np.repeat(psi, Nq, axis=0)
        self._cache = (psi_rep, phi, B, Nq)
        out = self.head.forward(psi_rep * phi, rng)
        return out.reshape(B, Nq, -1)

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward needs a forward pass with per-row quantile levels")
        psi_rep, phi, B, Nq = self._cache
        gh = self.head.backward(g.reshape(B * Nq, -1))
        self.embed.backward(self.relu.backward(gh * psi_rep))
        gpsi = (gh * phi).reshape(B, Nq, -1).sum(axis=1)
        return self.trunk.backward(gpsi)

    def parameters(self):
        return self.trunk.parameters() + self.embed.params() + self.head.parameters()

    def gradients(self):
        return self.trunk.gradients() + self.embed.grads() + self.head.gradients()

    def clone(self):
        return copy.deepcopy(self)


class IQNAgent(Agent):
    algorithm = "iqn"
    label = "IQN"

    def _build(self, rng):
        cfg = self.cfg
        width = cfg.hidden[0]
        trunk_layers = [self.scaler, Dense(self.spec.n_features, width, rng), ReLU()]
        if cfg.dropout > 0:
            trunk_layers.append(Dropout(cfg.dropout))
        head_layers = []
        prev = width
        for h in cfg.hidden[1:]:
            head_layers += [Dense(prev, h, rng), ReLU()]
            if cfg.dropout > 0:
                head_layers.append(Dropout(cfg.dropout))
            prev = h
        head_layers.append(Dense(prev, 2, rng))
        head_layers[-1].W *= cfg.out_init_scale
        return QuantileNetwork(Network(trunk_layers), Dense(cfg.n_embed, width, rng),
                               Network(head_layers), cfg.n_embed)

    def _export(self) -> dict:
        out = {}
        for name, q in (("online", self.online), ("target", self.target)):
            out[f"{name}_trunk"] = q.trunk
            out[f"{name}_embed"] = Network([q.embed])
            out[f"{name}_head"] = q.head
        return out

    def _import(self, nets: dict) -> None:
        for name in ("online", "target"):
            q = QuantileNetwork(nets[f"{name}_trunk"], nets[f"{name}_embed"].layers[0],
                                nets[f"{name}_head"], self.cfg.n_embed)
            setattr(self, name, q)

    @property
    def policy_taus(self) -> np.ndarray:
        k = self.cfg.n_policy_quantiles
        return (np.arange(k) + 0.5) / k

    def quantiles(self, features, tau, target=False):
        net = self.target if target else self.online
        net.train = False
        return net.forward(features, tau)

    def q_values(self, features, target=False, chunk: int = 2048):
        features = np.atleast_2d(features)
        out = np.empty((len(features), 2))
        for i in range(0, len(features), chunk):
            out[i:i + chunk] = self.quantiles(features[i:i + chunk], self.policy_taus, target).mean(axis=1)
        return out

    def learn(self, batch: TransitionBatch, rng) -> float:
        cfg = self.cfg
        n = len(batch)
        targets = np.repeat(batch.ret[:, None], cfg.n_target_quantiles, axis=1)
        rows = batch.boot_rows
        if rows.size:
            tau_next = rng.random((rows.size, cfg.n_target_quantiles)) * (1 - 2e-6) + 1e-6
            Z = self.quantiles(batch.states[batch.boot[rows]], tau_next, target=True)
            a = self.admissible_argmax(Z.mean(axis=1), batch.t[batch.boot[rows]])
            targets[rows] += batch.boot_discount[rows, None] * Z[np.arange(rows.size), :, a]

        tau = rng.random((n, cfg.n_quantiles)) * (1 - 2e-6) + 1e-6
        net = self.online
        net.train = True
        Zs = net.forward(batch.states, tau, rng)
        pred = Zs[np.arange(n), :, batch.actions]
        delta = targets[:, None, :] - pred[:, :, None]
        loss, gd = quantile_huber_loss(delta, tau, cfg.huber_kappa, with_grad=True)
        gpred = -gd.sum(axis=-1) / n
        gZ = np.zeros_like(Zs)
        gZ[np.arange(n), :, batch.actions] = gpred
        net.backward(gZ)
        net.train = False
        adam_step(net.parameters(), net.gradients(), self.adam)
        return float(loss.mean())
