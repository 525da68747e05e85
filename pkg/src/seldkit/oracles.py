"""Brute-force reference computations used by tests and ``seldkit selfcheck``.

These deliberately share no code with the fast paths they check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from seldkit.codec import PROB_EPS, TrackLabels


def brute_pit_loss(pred: TrackLabels, target: TrackLabels, lam: float) -> float:
    total = 0.0
    m = pred.sed.shape[1]
    for t in range(pred.sed.shape[0]):
        best = math.inf
        for perm in itertools.permutations(range(m)):
            idx = list(perm)
            p = np.clip(pred.sed[t, idx], PROB_EPS, 1 - PROB_EPS)
            y = target.sed[t]
            bce = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
            mse = np.mean((pred.doa[t, idx] - target.doa[t]) ** 2)
            best = min(best, lam * bce + (1 - lam) * mse)
        total += best
    return total / pred.sed.shape[0]


def brute_assignment(cost) -> float:
    """Minimum total cost over every matching of size min(n, m)."""
    c = np.asarray(cost, dtype=float)
    n, m = c.shape
    if n == 0 or m == 0:
        return 0.0
    if n > m:
        c = c.T
        n, m = m, n
    return min(sum(c[i, j] for i, j in enumerate(cols)) for cols in itertools.permutations(range(m), n))


def random_labels(rng: np.random.Generator, n_frames: int, n_tracks: int, n_classes: int,
                  target: bool) -> TrackLabels:
    if target:
        sed = np.zeros((n_frames, n_tracks, n_classes))
        doa = np.zeros((n_frames, n_tracks, 3))
        active = rng.random((n_frames, n_tracks)) < 0.6
        cls = rng.integers(0, n_classes, (n_frames, n_tracks))
        v = rng.normal(size=(n_frames, n_tracks, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        for t, m in zip(*np.nonzero(active)):
            sed[t, m, cls[t, m]] = 1.0
            doa[t, m] = v[t, m]
        return TrackLabels(sed, doa)
    return TrackLabels(rng.uniform(0.02, 0.98, (n_frames, n_tracks, n_classes)),
                       rng.uniform(-1, 1, (n_frames, n_tracks, 3)))
