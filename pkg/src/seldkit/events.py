"""Event records shared by the codec, simulator, metrics and file I/O.

An event list is a plain ``list[Event]``; one record per active
(frame, class, source) triple. Frames are in label units (100 ms by default).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

UNIT_TOL = 1e-3


@dataclass(frozen=True, order=True)
class Event:
    frame: int
    class_id: int
    source_id: int
    doa: tuple[float, float, float]

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.frame, self.class_id, self.source_id)

    def with_doa(self, doa) -> "Event":
        return Event(self.frame, self.class_id, self.source_id, tuple(float(v) for v in doa))


def make_event(frame: int, class_id: int, source_id: int, doa) -> Event:
    return Event(int(frame), int(class_id), int(source_id), tuple(float(v) for v in doa))


def sph_to_cart(azimuth_deg, elevation_deg) -> np.ndarray:
    """Unit vector(s) for azimuth/elevation in degrees.

    x = cos(el) cos(az), y = cos(el) sin(az), z = sin(el).
    """
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
    el = np.deg2rad(np.asarray(elevation_deg, dtype=float))
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def cart_to_sph(vec) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth in [-180, 180) and elevation in [-90, 90], both in degrees."""
    v = np.asarray(vec, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    az = np.rad2deg(np.arctan2(y, x))
    el = np.rad2deg(np.arctan2(z, np.hypot(x, y)))
    az = np.where(az >= 180.0, az - 360.0, az)
    return az, el


def sort_events(events: Iterable[Event]) -> list[Event]:
    return sorted(events, key=lambda e: e.key)


def polyphony(events: Iterable[Event]) -> Counter:
    """Number of active events per frame."""
    return Counter(e.frame for e in events)


def max_polyphony(events: Iterable[Event]) -> int:
    counts = polyphony(events)
    return max(counts.values()) if counts else 0


def check_unit(events: Sequence[Event], tol: float = UNIT_TOL) -> None:
    for e in events:
        n = float(np.linalg.norm(e.doa))
        if abs(n - 1.0) > tol:
            raise ValueError(f"event {e.key} has non-unit DoA (norm {n:.6f})")


def rotate_events(events: Iterable[Event], matrix: np.ndarray) -> list[Event]:
    m = np.asarray(matrix, dtype=float)
    return [e.with_doa(m @ np.asarray(e.doa)) for e in events]


def relabel_sources(events: Iterable[Event]) -> list[Event]:
    """Renumber sources 0..n-1 within each (frame, class), keeping their order.

    The track codec does not carry source identities, so round trips are
    compared after this canonicalization.
    """
    out = []
    counter: dict[tuple[int, int], int] = {}
    for e in sort_events(events):
        k = (e.frame, e.class_id)
        idx = counter.get(k, 0)
        counter[k] = idx + 1
        out.append(Event(e.frame, e.class_id, idx, e.doa))
    return out
