"""Slow reference implementations used as test oracles."""

import math

import numpy as np


def c51_project_bruteforce(r, gamma, next_probs, v_min, v_max, n_atoms, terminal):
    """Move each atom's mass one at a time onto its two neighbouring atoms."""
    delta = (v_max - v_min) / (n_atoms - 1)
    z = [v_min + i * delta for i in range(n_atoms)]
    out = [0.0] * n_atoms
    sources = [(r, 1.0)] if terminal else [(r + gamma * z[j], next_probs[j]) for j in range(n_atoms)]
    for value, mass in sources:
        v = min(max(value, v_min), v_max)
        b = (v - v_min) / delta
        lo, hi = math.floor(b), math.ceil(b)
        lo, hi = min(max(lo, 0), n_atoms - 1), min(max(hi, 0), n_atoms - 1)
        if lo == hi:
            out[lo] += mass
        else:
            out[lo] += mass * (hi - b)
            out[hi] += mass * (b - lo)
    return np.array(out)


def random_c51_case(rng):
    n_atoms = int(rng.integers(2, 8))
    v_min = float(rng.uniform(-2, 0.5))
    v_max = v_min + float(rng.uniform(0.1, 3))
    gamma = float(rng.choice([0.0, 1.0, rng.uniform(0, 1)]))
    p = rng.dirichlet(np.ones(n_atoms))
    if rng.random() < 0.2:
        # rewards exactly on an atom exercise the integral-index path
        r = v_min + int(rng.integers(n_atoms)) * (v_max - v_min) / (n_atoms - 1)
    else:
        r = float(rng.uniform(v_min - 1, v_max + 1))
    terminal = bool(rng.random() < 0.3)
    return r, gamma, p, v_min, v_max, n_atoms, terminal
