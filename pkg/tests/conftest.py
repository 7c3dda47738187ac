import itertools

import numpy as np
import pytest


def enumerate_auc(pos, neg, ties="strict"):
    """Reference AUC by looping over every (positive, negative) pair."""
    total = 0.0
    for a, b in itertools.product(pos, neg):
        if a > b:
            total += 1.0
        elif a == b and ties == "half":
            total += 0.5
    return total / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def grid_project(v, p_hat, gamma, final_step=1e-3):
    """Brute-force nearest point of the TV ball on a lattice through ``p_hat``.

    Searches offsets ``p_hat + step * k`` (last coordinate fixed by the sum)
    from a coarse step down to ``final_step``, re-centring a small window on
    the incumbent each round. The objective is convex, so the refinement
    tracks the lattice optimum.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    c = np.asarray(p_hat, dtype=np.float64).ravel()
    d = c.size
    budget = 2.0 * gamma
    best = c.copy()
    steps = [0.05, 0.02, 0.01, 0.005, 0.002, final_step]
    for i, step in enumerate(steps):
        half = 25 if i == 0 else 6
        ks = np.arange(-half, half + 1) * step
        mesh = np.stack(np.meshgrid(*([ks] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1)
        head = best[:-1] + mesh
        cand = np.column_stack([head, 1.0 - head.sum(axis=1)])
        ok = (cand >= -1e-12).all(axis=1) & (np.abs(cand - c).sum(axis=1) <= budget + 1e-12)
        cand = cand[ok]
        if cand.size == 0:
            continue
        best = cand[np.argmin(((cand - v) ** 2).sum(axis=1))]
    return best
