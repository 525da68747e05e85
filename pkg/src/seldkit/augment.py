"""Augmentation chains over feature tensors plus FOA channel rotation.

Feature tensors are ``channels x frames x mels`` arrays. Chain ops never touch
timing, so labels only change when a mixup op blends in a partner sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from seldkit.codec import TrackLabels, active_tracks
from seldkit.events import Event, rotate_events
from seldkit.features import CHANNEL_LAYOUT, LOGMEL_FILL, FoaClip

KINDS = ("mixup_wave", "mixup_spec", "cutout", "spec_augment", "freq_shift")
FEATURE_KINDS = ("mixup_spec", "cutout", "spec_augment", "freq_shift")
MASK_KINDS = ("cutout", "spec_augment", "freq_shift")
N_ROTATIONS = 16


@dataclass(frozen=True)
class AugmentRanges:
    max_rects: int = 5
    rect_max_frac: float = 0.25
    max_time_masks: int = 2
    max_freq_masks: int = 2
    stripe_max_frac: float = 0.1
    shift_max: int = 10
    mixup_alpha: float = 1.0


@dataclass
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")


@dataclass
class AugmentChain:
    ops: list[AugmentOp]

    def __post_init__(self):
        if not self.ops:
            raise ValueError("augmentation chain must contain at least one op")

    @property
    def has_mixup(self) -> bool:
        return any(op.kind.startswith("mixup") for op in self.ops)


# --- rotations -------------------------------------------------------------

def _rot_z(quarter_turns: int) -> np.ndarray:
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


_SWAP_XY = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
_NEG_Z = np.diag([1.0, 1.0, -1.0])


def rotation_matrix(index: int) -> np.ndarray:
    """Signed permutation of (x, y, z) for rotation index 0..15.

    index = quarter_turns + 4 * swap_xy + 8 * negate_z; 0 is the identity.
    """
    if not isinstance(index, (int, np.integer)) or not 0 <= index < N_ROTATIONS:
        raise ValueError(f"rotation index must be an integer in [0, {N_ROTATIONS}), got {index!r}")
    m = _rot_z(index % 4)
    if (index // 4) % 2:
        m = _SWAP_XY @ m
    if index // 8:
        m = _NEG_Z @ m
    return m


def all_rotations() -> list[np.ndarray]:
    return [rotation_matrix(r) for r in range(N_ROTATIONS)]


def foa_rotate(clip: FoaClip, events: Sequence[Event], r: int) -> tuple[FoaClip, list[Event]]:
    m = rotation_matrix(r)
    samples = clip.samples.copy()
    samples[1:] = m @ clip.samples[1:]
    return FoaClip(samples, clip.sample_rate), rotate_events(events, m)


# --- single ops ------------------------------------------------------------

def default_fill(n_channels: int) -> np.ndarray:
    if n_channels == len(CHANNEL_LAYOUT):
        return np.array([LOGMEL_FILL] * 4 + [0.0] * 3)
    return np.zeros(n_channels)


def _rand_extent(rng: np.random.Generator, dim: int, max_frac: float) -> int:
    return int(rng.integers(1, max(1, int(dim * max_frac)) + 1))


def sample_rects(rng: np.random.Generator, shape, n_rects: int, max_frac: float = 0.25):
    """Integer boxes (t0, t1, f0, f1) with each side at most ``max_frac`` of its axis."""
    n_t, n_f = shape[-2], shape[-1]
    rects = []
    for _ in range(n_rects):
        h = _rand_extent(rng, n_t, max_frac)
        w = _rand_extent(rng, n_f, max_frac)
        t0 = int(rng.integers(0, n_t - h + 1))
        f0 = int(rng.integers(0, n_f - w + 1))
        rects.append((t0, t0 + h, f0, f0 + w))
    return rects


def apply_rects(spec: np.ndarray, rects) -> np.ndarray:
    """Set each box to the per-channel mean of the input."""
    out = np.array(spec, dtype=float, copy=True)
    mean = out.mean(axis=(-2, -1), keepdims=True)
    for t0, t1, f0, f1 in rects:
        out[..., t0:t1, f0:f1] = np.broadcast_to(mean, out[..., t0:t1, f0:f1].shape)
    return out


def cutout(spec: np.ndarray, rng: np.random.Generator, n_rects: int = 1, max_frac: float = 0.25,
           return_rects: bool = False):
    rects = sample_rects(rng, spec.shape, n_rects, max_frac)
    out = apply_rects(spec, rects)
    return (out, rects) if return_rects else out


def apply_stripes(spec: np.ndarray, time_masks=(), freq_masks=(), fill=None) -> np.ndarray:
    """Fill full-height time stripes and full-width frequency stripes.

    Masks are ``(start, width)`` pairs; ``fill`` is one value per channel.
    """
    out = np.array(spec, dtype=float, copy=True)
    fill = default_fill(out.shape[0]) if fill is None else np.asarray(fill, dtype=float)
    fill = np.broadcast_to(fill, (out.shape[0],))[:, None, None]
    n_t, n_f = out.shape[-2:]
    for start, width in time_masks:
        if width > n_t:
            raise ValueError(f"time mask width {width} exceeds {n_t} frames")
        out[:, start:start + width, :] = np.broadcast_to(fill, out[:, start:start + width, :].shape)
    for start, width in freq_masks:
        if width > n_f:
            raise ValueError(f"frequency mask width {width} exceeds {n_f} bands")
        out[:, :, start:start + width] = np.broadcast_to(fill, out[:, :, start:start + width].shape)
    return out


def sample_stripes(rng: np.random.Generator, dim: int, n_masks: int, max_frac: float = 0.1):
    masks = []
    for _ in range(n_masks):
        w = _rand_extent(rng, dim, max_frac)
        masks.append((int(rng.integers(0, dim - w + 1)), w))
    return masks


def spec_augment(spec: np.ndarray, rng: np.random.Generator, n_time_masks: int = 2, n_freq_masks: int = 2,
                 max_frac: float = 0.1, fill=None, return_masks: bool = False):
    n_t, n_f = spec.shape[-2:]
    tm = sample_stripes(rng, n_t, n_time_masks, max_frac)
    fm = sample_stripes(rng, n_f, n_freq_masks, max_frac)
    out = apply_stripes(spec, tm, fm, fill)
    return (out, (tm, fm)) if return_masks else out


def freq_shift(spec: np.ndarray, shift: int, shift_max: int = 10) -> np.ndarray:
    """Shift every channel by ``shift`` mel bands (positive = upward), zero-filling."""
    if abs(shift) > shift_max:
        raise ValueError(f"|shift| = {abs(shift)} exceeds shift_max = {shift_max}")
    spec = np.asarray(spec, dtype=float)
    out = np.zeros_like(spec)
    if shift == 0:
        out[...] = spec
    elif shift > 0:
        out[..., shift:] = spec[..., :-shift]
    else:
        out[..., :shift] = spec[..., -shift:]
    return out


def mix_track_labels(a: TrackLabels, b: TrackLabels, weight_a: float, soft: bool = False) -> TrackLabels:
    """Union of both inputs' active tracks, heaviest first, capped at M tracks.

    Events with zero weight are left out. With ``soft`` the class rows are
    scaled by their weight instead of staying binary.
    """
    if a.sed.shape != b.sed.shape:
        raise ValueError(f"label shapes differ: {a.sed.shape} vs {b.sed.shape}")
    weight_b = 1.0 - weight_a
    out = TrackLabels.zeros(a.n_frames, a.n_tracks, a.n_classes)
    act_a, act_b = active_tracks(a), active_tracks(b)
    sources = [(weight_a, 0, a, act_a), (weight_b, 1, b, act_b)]
    sources.sort(key=lambda s: (-s[0], s[1]))
    for t in range(a.n_frames):
        slot = 0
        for w, _, lab, act in sources:
            if w <= 0:
                continue
            for m in np.nonzero(act[t])[0]:
                if slot >= a.n_tracks:
                    break
                row = lab.sed[t, m]
                out.sed[t, slot] = row * w if soft else (row > 0).astype(float)
                out.doa[t, slot] = lab.doa[t, m]
                slot += 1
    return out


def mixup(a, b, alpha: float = 1.0, rng: np.random.Generator | None = None, lam: float | None = None,
          soft: bool = False):
    """Convex mix of two (sample, labels) pairs; samples may be arrays or FoaClips.

    ``labels`` entries may be None. Returns ``((sample, labels), lam)``.
    """
    xa, la = a
    xb, lb = b
    clip_rate = None
    if isinstance(xa, FoaClip):
        if not isinstance(xb, FoaClip) or xb.sample_rate != xa.sample_rate:
            raise ValueError("waveform mixup needs two FoaClips at the same sample rate")
        clip_rate = xa.sample_rate
        xa, xb = xa.samples, xb.samples
    xa, xb = np.asarray(xa, dtype=float), np.asarray(xb, dtype=float)
    if xa.shape != xb.shape:
        raise ValueError(f"mixup shape mismatch: {xa.shape} vs {xb.shape}")
    if lam is None:
        if alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        lam = float(rng.beta(alpha, alpha))
    out = lam * xa + (1.0 - lam) * xb
    if clip_rate is not None:
        out = FoaClip(out, clip_rate)
    labels = None
    if la is not None and lb is not None:
        labels = mix_track_labels(la, lb, lam, soft)
    elif la is not None:
        labels = la.copy()
    return (out, labels), lam


# --- chains ----------------------------------------------------------------

def _sample_op(rng: np.random.Generator, kind: str, ranges: AugmentRanges) -> AugmentOp:
    seed = int(rng.integers(0, 2**31 - 1))
    if kind == "cutout":
        return AugmentOp(kind, {"n_rects": int(rng.integers(1, ranges.max_rects + 1)), "seed": seed})
    if kind == "spec_augment":
        return AugmentOp(kind, {"n_time": int(rng.integers(0, ranges.max_time_masks + 1)),
                                "n_freq": int(rng.integers(0, ranges.max_freq_masks + 1)), "seed": seed})
    if kind == "freq_shift":
        return AugmentOp(kind, {"shift": int(rng.integers(-ranges.shift_max, ranges.shift_max + 1))})
    return AugmentOp(kind, {"lam": float(rng.beta(ranges.mixup_alpha, ranges.mixup_alpha))})


def sample_chain(rng: np.random.Generator, pool: Sequence[str] = FEATURE_KINDS,
                 depth_range: tuple[int, int] = (1, 3), ranges: AugmentRanges | None = None) -> AugmentChain:
    if not pool:
        raise ValueError("augmentation pool is empty")
    for kind in pool:
        if kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {kind!r}")
    lo, hi = depth_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad depth range {depth_range}")
    ranges = ranges or AugmentRanges()
    depth = int(rng.integers(lo, hi + 1))
    return AugmentChain([_sample_op(rng, pool[int(rng.integers(len(pool)))], ranges) for _ in range(depth)])


def run_chain(chain: AugmentChain, x: np.ndarray, partner=None,
              ranges: AugmentRanges | None = None) -> tuple[np.ndarray, float]:
    """Apply ``chain`` to features ``x``; returns the output and the weight left on ``x``."""
    ranges = ranges or AugmentRanges()
    weight = 1.0
    y = np.asarray(x, dtype=float)
    for op in chain.ops:
        p = op.params
        if op.kind == "cutout":
            y = cutout(y, np.random.default_rng(p["seed"]), p["n_rects"], ranges.rect_max_frac)
        elif op.kind == "spec_augment":
            y = spec_augment(y, np.random.default_rng(p["seed"]), p["n_time"], p["n_freq"],
                             ranges.stripe_max_frac)
        elif op.kind == "freq_shift":
            y = freq_shift(y, p["shift"], ranges.shift_max)
        elif op.kind == "mixup_spec":
            if partner is None:
                raise ValueError("mixup_spec in a chain needs a partner sample")
            (y, _), lam = mixup((y, None), (partner, None), lam=p["lam"])
            weight *= lam
        else:
            raise ValueError(f"{op.kind} runs on waveforms and cannot be part of a feature chain")
    return y, weight


def apply_chains(x: np.ndarray, labels: TrackLabels | None, k: int = 3, rng: np.random.Generator | None = None,
                 pool: Sequence[str] = FEATURE_KINDS, depth_range: tuple[int, int] = (1, 3),
                 alpha: float = 1.0, ranges: AugmentRanges | None = None, partner=None,
                 skip_weight: float | None = None):
    """Mix ``k`` randomly sampled chains and blend the result with the input.

    Branches get Dirichlet(alpha) weights and the clean input keeps a
    Beta(alpha, alpha) share (``skip_weight`` forces it). ``partner`` is a
    ``(features, labels)`` pair used by mixup ops.
    """
    if k < 1:
        raise ValueError("need at least one chain")
    if rng is None:
        rng = np.random.default_rng()
    x = np.asarray(x, dtype=float)
    ranges = ranges or AugmentRanges()
    chains = [sample_chain(rng, pool, depth_range, ranges) for _ in range(k)]
    weights = rng.dirichlet([alpha] * k)
    m = float(rng.beta(alpha, alpha)) if skip_weight is None else float(skip_weight)
    px, pl = partner if partner is not None else (None, None)
    mix = np.zeros_like(x)
    kept = 0.0
    for w, chain in zip(weights, chains):
        y, keep = run_chain(chain, x, px, ranges)
        mix += w * y
        kept += w * keep
    out = m * x + (1.0 - m) * mix
    if labels is None:
        return out, None
    used_mixup = m < 1.0 and any(c.has_mixup for c in chains)
    if not used_mixup or pl is None:
        return out, labels.copy()
    return out, mix_track_labels(labels, pl, m + (1.0 - m) * kept)
