"""Track-wise label tensors, permutation-invariant loss and its gradient.

Each frame carries ``M`` class-agnostic tracks; a track holds a one-hot (or
probabilistic) class row and a Cartesian DoA. The loss picks, per frame, the
track permutation with the lowest weighted BCE + MSE.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from seldkit.events import Event, check_unit, sort_events

PROB_EPS = 1e-7


@dataclass
class TrackLabels:
    sed: np.ndarray  # frames x M x K
    doa: np.ndarray  # frames x M x 3

    def __post_init__(self):
        self.sed = np.asarray(self.sed, dtype=float)
        self.doa = np.asarray(self.doa, dtype=float)
        if self.sed.ndim != 3 or self.doa.ndim != 3 or self.doa.shape[2] != 3:
            raise ValueError(f"bad label shapes sed={self.sed.shape} doa={self.doa.shape}")
        if self.sed.shape[:2] != self.doa.shape[:2]:
            raise ValueError(f"sed {self.sed.shape} and doa {self.doa.shape} disagree on frames/tracks")
        if self.sed.shape[1] < 1 or self.sed.shape[2] < 1:
            raise ValueError("need at least one track and one class")

    @classmethod
    def zeros(cls, n_frames: int, n_tracks: int = 3, n_classes: int = 13) -> "TrackLabels":
        return cls(np.zeros((n_frames, n_tracks, n_classes)), np.zeros((n_frames, n_tracks, 3)))

    @property
    def n_frames(self) -> int:
        return self.sed.shape[0]

    @property
    def n_tracks(self) -> int:
        return self.sed.shape[1]

    @property
    def n_classes(self) -> int:
        return self.sed.shape[2]

    def copy(self) -> "TrackLabels":
        return TrackLabels(self.sed.copy(), self.doa.copy())

    def permute_tracks(self, perm) -> "TrackLabels":
        perm = np.asarray(perm)
        if perm.ndim == 1:
            return TrackLabels(self.sed[:, perm], self.doa[:, perm])
        idx = np.arange(self.n_frames)[:, None]
        return TrackLabels(self.sed[idx, perm], self.doa[idx, perm])

    def frame(self, t: int) -> "TrackLabels":
        return TrackLabels(self.sed[t:t + 1], self.doa[t:t + 1])

    def rotate(self, matrix) -> "TrackLabels":
        return TrackLabels(self.sed.copy(), self.doa @ np.asarray(matrix, dtype=float).T)


@dataclass
class PitLossResult:
    loss: float
    per_frame_perm: np.ndarray  # frames x M; pred track used for target track j
    sed_loss: float
    doa_loss: float


@lru_cache(maxsize=None)
def permutations(n_tracks: int) -> np.ndarray:
    """All permutations of range(n_tracks) in lexicographic order."""
    return np.array(list(itertools.permutations(range(n_tracks))), dtype=np.intp).reshape(-1, n_tracks)


def encode_labels(events: Iterable[Event], n_frames: int, n_tracks: int = 3,
                  n_classes: int = 13) -> tuple[TrackLabels, int]:
    """Fill tracks frame by frame; returns the labels and the number of dropped events.

    Active events are ordered by (class, source) and take tracks 0..M-1;
    anything past the last track is dropped.
    """
    if n_tracks < 1 or n_classes < 1:
        raise ValueError("n_tracks and n_classes must be >= 1")
    events = sort_events(events)
    check_unit(events)
    labels = TrackLabels.zeros(n_frames, n_tracks, n_classes)
    used = np.zeros(n_frames, dtype=int)
    dropped = 0
    for e in events:
        if not 0 <= e.class_id < n_classes:
            raise ValueError(f"event {e.key}: class {e.class_id} outside [0, {n_classes})")
        if not 0 <= e.frame < n_frames:
            raise ValueError(f"event {e.key}: frame outside [0, {n_frames})")
        track = used[e.frame]
        if track >= n_tracks:
            dropped += 1
            continue
        labels.sed[e.frame, track, e.class_id] = 1.0
        labels.doa[e.frame, track] = e.doa
        used[e.frame] += 1
    return labels, dropped


def decode_predictions(pred: TrackLabels, threshold: float = 0.5) -> list[Event]:
    """Events for every track whose best class probability exceeds ``threshold``.

    Source ids are ordinals within (frame, class) in track order.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    best = pred.sed.argmax(axis=2)
    prob = np.take_along_axis(pred.sed, best[..., None], axis=2)[..., 0]
    events = []
    seen: dict[tuple[int, int], int] = {}
    n_zero = 0
    for t, m in zip(*np.nonzero(prob > threshold)):
        c = int(best[t, m])
        v = pred.doa[t, m]
        n = float(np.linalg.norm(v))
        if n > 0:
            v = v / n
        else:
            n_zero += 1
        src = seen.get((int(t), c), 0)
        seen[(int(t), c)] = src + 1
        events.append(Event(int(t), c, src, tuple(float(a) for a in v)))
    if n_zero:
        warnings.warn(f"{n_zero} active track(s) decoded with zero-norm DoA", RuntimeWarning, stacklevel=2)
    return sort_events(events)


def _check_pair(pred: TrackLabels, target: TrackLabels, lam: float) -> None:
    if pred.sed.shape != target.sed.shape or pred.doa.shape != target.doa.shape:
        raise ValueError(f"shape mismatch: pred {pred.sed.shape} vs target {target.sed.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {lam}")


def _pair_costs(pred: TrackLabels, target: TrackLabels):
    """BCE and MSE between every (pred track i, target track j) pair: frames x M x M."""
    k = pred.n_classes
    p = np.clip(pred.sed, PROB_EPS, 1 - PROB_EPS)
    y = target.sed
    bce = -(np.einsum("tik,tjk->tij", np.log(p), y) + np.einsum("tik,tjk->tij", np.log1p(-p), 1 - y)) / k
    diff = pred.doa[:, :, None, :] - target.doa[:, None, :, :]
    mse = (diff ** 2).mean(axis=-1)
    return bce, mse


def _select(pair: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """terms[t, p, j] = pair[t, perms[p, j], j]."""
    cols = np.arange(perms.shape[1])
    return pair[:, perms, cols[None, :]]


def _frame_costs(pred: TrackLabels, target: TrackLabels, lam: float):
    bce, mse = _pair_costs(pred, target)
    perms = permutations(pred.n_tracks)
    terms = _select(lam * bce + (1 - lam) * mse, perms)
    # sorting before summing makes costs of equal term multisets bitwise equal,
    # so symmetric situations tie exactly and the lexicographic rule applies
    costs = np.sort(terms, axis=-1).sum(axis=-1) / pred.n_tracks
    return costs, bce, mse, perms


def pit_loss(pred: TrackLabels, target: TrackLabels, lam: float = 0.5) -> PitLossResult:
    _check_pair(pred, target, lam)
    costs, bce, mse, perms = _frame_costs(pred, target, lam)
    best = costs.argmin(axis=1)
    chosen = perms[best]
    t = np.arange(pred.n_frames)
    m = pred.n_tracks
    sed_frame = _select(bce, perms)[t, best].sum(axis=-1) / m
    doa_frame = _select(mse, perms)[t, best].sum(axis=-1) / m
    return PitLossResult(
        loss=float(costs[t, best].mean()),
        per_frame_perm=chosen,
        sed_loss=float(sed_frame.mean()),
        doa_loss=float(doa_frame.mean()),
    )


def best_permutation(pred_frame: TrackLabels, target_frame: TrackLabels, lam: float = 0.5) -> tuple[int, ...]:
    """Lowest-cost track mapping for a single frame; ties go to the lexicographically smallest."""
    _check_pair(pred_frame, target_frame, lam)
    if pred_frame.n_frames != 1:
        raise ValueError(f"expected a single frame, got {pred_frame.n_frames}")
    costs, _, _, perms = _frame_costs(pred_frame, target_frame, lam)
    return tuple(int(i) for i in perms[costs[0].argmin()])


def pit_grad(pred: TrackLabels, target: TrackLabels, lam: float = 0.5) -> TrackLabels:
    """Gradient of ``pit_loss`` w.r.t. ``pred`` with each frame's permutation held fixed."""
    res = pit_loss(pred, target, lam)
    n_t, m, k = pred.sed.shape
    inv = np.argsort(res.per_frame_perm, axis=1)
    aligned = target.permute_tracks(inv)  # aligned[t, i] is the target matched to pred track i
    p = pred.sed
    inside = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    g_sed = np.where(inside, (pc - aligned.sed) / (pc * (1 - pc)), 0.0) * (lam / (n_t * m * k))
    g_doa = (pred.doa - aligned.doa) * (2.0 * (1 - lam) / (n_t * m * 3))
    return TrackLabels(g_sed, g_doa)


def resample_labels(labels: TrackLabels, n_out: int) -> TrackLabels:
    """Nearest-frame resampling to another frame rate."""
    src = np.floor((np.arange(n_out) + 0.5) * labels.n_frames / n_out).astype(int)
    src = np.clip(src, 0, labels.n_frames - 1)
    return TrackLabels(labels.sed[src], labels.doa[src])


def active_tracks(labels: TrackLabels) -> np.ndarray:
    """Boolean frames x M mask of tracks carrying any class mass."""
    return labels.sed.max(axis=2) > 0


def stack_frames(items: Sequence[TrackLabels]) -> TrackLabels:
    return TrackLabels(np.concatenate([i.sed for i in items]), np.concatenate([i.doa for i in items]))
