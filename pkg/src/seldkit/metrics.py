"""Joint localization and detection scores over 1-second segments.

Within each (segment, class), each source's DoA is averaged over its active
frames; references and predictions are then paired by minimum total angular
distance. Pairs within the spatial threshold are true positives; every pair
contributes its angle to the localization error.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from seldkit.assignment import linear_assignment
from seldkit.events import Event

UNDEFINED_LE = 180.0


def angular_distance(u, v) -> float:
    """Angle between unit vectors in degrees."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    for name, a in (("u", u), ("v", v)):
        if abs(np.linalg.norm(a) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a unit vector (norm {np.linalg.norm(a):.6g})")
    return float(angle_matrix(u[None], v[None])[0, 0])


def angle_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise angles (degrees) between rows of ``a`` and rows of ``b``.

    Uses atan2(|u x v|, u . v), which is well conditioned near 0 and 180 degrees.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    cross = np.linalg.norm(np.cross(a[:, None, :], b[None, :, :]), axis=-1)
    dot = np.clip(a @ b.T, -1.0, 1.0)
    return np.degrees(np.arctan2(cross, dot))


def segment_events(events: Iterable[Event], frames_per_segment: int = 10) -> dict[tuple[int, int], np.ndarray]:
    """Map (segment, class) to an array of per-source mean DoAs, ordered by source id."""
    if frames_per_segment < 1:
        raise ValueError("frames_per_segment must be >= 1")
    acc: dict[tuple[int, int, int], list] = defaultdict(list)
    for e in events:
        acc[(e.frame // frames_per_segment, e.class_id, e.source_id)].append((e.frame, e.doa))
    view: dict[tuple[int, int], list] = defaultdict(list)
    for (seg, cls, _src), rows in sorted(acc.items()):
        # frame order makes the sum independent of input order
        doas = [d for _, d in sorted(rows)]
        mean = np.mean(np.asarray(doas), axis=0)
        n = np.linalg.norm(mean)
        view[(seg, cls)].append(mean / n if n > 1e-12 else np.asarray(doas[0], dtype=float))
    return {k: np.array(v) for k, v in view.items()}


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    errors: list[float]

    @property
    def n_matched(self) -> int:
        return len(self.errors)


def match_segment(refs, preds, threshold: float = 20.0) -> MatchResult:
    refs = np.asarray(refs, dtype=float).reshape(-1, 3)
    preds = np.asarray(preds, dtype=float).reshape(-1, 3)
    n, m = len(refs), len(preds)
    if n == 0 or m == 0:
        return MatchResult(0, m, n, [])
    cost = angle_matrix(refs, preds)
    rows, cols = linear_assignment(cost)
    errors = cost[rows, cols]
    tp = int(np.sum(errors <= threshold))
    return MatchResult(tp, m - tp, n - tp, [float(e) for e in errors])


@dataclass
class ClassCounts:
    n_ref: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0
    n_matched: int = 0
    le_sum: float = 0.0

    def add_segment(self, n_ref: int, res: MatchResult) -> None:
        s = min(res.fp, res.fn)
        self.n_ref += n_ref
        self.tp += res.tp
        self.fp += res.fp
        self.fn += res.fn
        self.subs += s
        self.dels += res.fn - s
        self.ins += res.fp - s
        self.n_matched += res.n_matched
        self.le_sum += math.fsum(res.errors)

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(*(getattr(self, f) + getattr(other, f) for f in _COUNT_FIELDS))

    @property
    def er(self) -> float:
        return (self.subs + self.dels + self.ins) / self.n_ref if self.n_ref else math.nan

    @property
    def f(self) -> float:
        den = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / den if den else math.nan

    @property
    def le(self) -> float:
        return self.le_sum / self.n_matched if self.n_matched else UNDEFINED_LE

    @property
    def le_defined(self) -> bool:
        return self.n_matched > 0

    @property
    def lr(self) -> float:
        return self.n_matched / self.n_ref if self.n_ref else math.nan

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in _COUNT_FIELDS}


_COUNT_FIELDS = ("n_ref", "tp", "fp", "fn", "subs", "dels", "ins", "n_matched", "le_sum")


def _num(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


@dataclass
class MetricReport:
    er: float
    f: float
    le: float
    lr: float
    le_defined: bool
    counts: list[ClassCounts]
    average: str = "macro"
    threshold: float = 20.0
    tags: dict = field(default_factory=dict)
    per_group: dict[str, "MetricReport"] = field(default_factory=dict)
    class_names: Sequence[str] | None = None

    @classmethod
    def from_counts(cls, counts: Sequence[ClassCounts], average: str = "macro", threshold: float = 20.0,
                    **kw) -> "MetricReport":
        counts = list(counts)
        if average == "micro":
            tot = sum(counts, ClassCounts())
            return cls(tot.er, tot.f, tot.le, tot.lr, tot.le_defined, counts, average, threshold, **kw)
        if average != "macro":
            raise ValueError(f"averaging must be 'macro' or 'micro', got {average!r}")
        scored = [c for c in counts if c.n_ref > 0]
        if not scored:
            return cls(math.nan, math.nan, UNDEFINED_LE, math.nan, False, counts, average, threshold, **kw)
        er = float(np.mean([c.er for c in scored]))
        f = float(np.mean([c.f for c in scored]))
        lr = float(np.mean([c.lr for c in scored]))
        defined = [c.le for c in scored if c.le_defined]
        le = float(np.mean(defined)) if defined else UNDEFINED_LE
        return cls(er, f, le, lr, bool(defined), counts, average, threshold, **kw)

    @property
    def seld_score(self) -> float:
        return (self.er + (1 - self.f) + self.le / 180.0 + (1 - self.lr)) / 4.0

    def class_name(self, c: int) -> str:
        if self.class_names is not None and c < len(self.class_names):
            return str(self.class_names[c])
        return str(c)

    def per_class(self) -> list[dict]:
        rows = []
        for c, k in enumerate(self.counts):
            rows.append({"class": c, "name": self.class_name(c), "er": _num(k.er), "f": _num(k.f),
                         "le": _num(k.le), "le_defined": k.le_defined, "lr": _num(k.lr),
                         "in_macro": k.n_ref > 0, "counts": k.as_dict()})
        return rows

    def to_dict(self) -> dict:
        d = {"er": _num(self.er), "f": _num(self.f), "le": _num(self.le), "le_defined": self.le_defined,
             "lr": _num(self.lr), "average": self.average, "threshold_deg": self.threshold,
             "per_class": self.per_class()}
        if self.tags:
            d["tags"] = dict(self.tags)
        if self.per_group:
            d["per_group"] = {g: r.to_dict() for g, r in sorted(self.per_group.items())}
        return d

    def summary_line(self) -> str:
        def pct(x):
            return "n/a" if math.isnan(x) else f"{100 * x:.1f}%"

        er = "n/a" if math.isnan(self.er) else f"{self.er:.2f}"
        le = f"{self.le:.1f}°" + ("" if self.le_defined else " (undefined)")
        return f"ER {er}  F {pct(self.f)}  LE {le}  LR {pct(self.lr)}"

    def format_table(self) -> str:
        lines = [f"{self.average} / {self.threshold:g}°: {self.summary_line()}", "",
                 f"{'class':<24}{'ER':>8}{'F':>9}{'LE':>9}{'LR':>9}{'Nref':>7}"]
        for row in self.per_class():
            er = "-" if row["er"] is None else f"{row['er']:.2f}"
            f = "-" if row["f"] is None else f"{100 * row['f']:.1f}%"
            le = f"{row['le']:.1f}" if row["le_defined"] else "-"
            lr = "-" if row["lr"] is None else f"{100 * row['lr']:.1f}%"
            lines.append(f"{row['name']:<24}{er:>8}{f:>9}{le:>9}{lr:>9}{row['counts']['n_ref']:>7}")
        for g, r in sorted(self.per_group.items()):
            lines.append("")
            lines.append(f"[{g}] {r.summary_line()}")
        return "\n".join(lines)


def count_matches(ref: Sequence[Event], pred: Sequence[Event], threshold: float = 20.0,
                  n_classes: int | None = None, frames_per_segment: int = 10) -> list[ClassCounts]:
    ref_view = segment_events(ref, frames_per_segment)
    pred_view = segment_events(pred, frames_per_segment)
    top = max([k[1] for k in ref_view] + [k[1] for k in pred_view], default=-1) + 1
    if n_classes is None:
        n_classes = top
    elif top > n_classes:
        raise ValueError(f"events use class {top - 1} but only {n_classes} classes are configured")
    counts = [ClassCounts() for _ in range(n_classes)]
    empty = np.zeros((0, 3))
    for key in sorted(set(ref_view) | set(pred_view)):
        r = ref_view.get(key, empty)
        counts[key[1]].add_segment(len(r), match_segment(r, pred_view.get(key, empty), threshold))
    return counts


def compute_metrics(ref: Sequence[Event], pred: Sequence[Event], threshold: float = 20.0,
                    average: str = "macro", n_classes: int | None = None, frames_per_segment: int = 10,
                    n_frames: int | None = None, tags: dict | None = None,
                    class_names: Sequence[str] | None = None) -> MetricReport:
    """ER, F, LE and LR for one clip (or any pre-concatenated event lists).

    ``n_frames`` is the clip length in label frames; events past it on either
    side are a duration mismatch.
    """
    if n_frames is not None:
        for side, evs in (("reference", ref), ("prediction", pred)):
            last = max((e.frame for e in evs), default=-1)
            if last >= n_frames:
                raise ValueError(f"duration mismatch: {side} has frame {last} but the clip has {n_frames} frames")
    counts = count_matches(ref, pred, threshold, n_classes, frames_per_segment)
    return MetricReport.from_counts(counts, average, threshold, tags=dict(tags or {}), class_names=class_names)


def _pool(reports: Sequence[MetricReport]) -> list[ClassCounts]:
    n = max(len(r.counts) for r in reports)
    pooled = [ClassCounts() for _ in range(n)]
    for r in reports:
        for c, k in enumerate(r.counts):
            pooled[c] = pooled[c] + k
    return pooled


def aggregate(reports: Sequence[MetricReport], group_by: str | None = None) -> MetricReport:
    """Pool per-clip counts overall and per tag value before taking ratios."""
    if not reports:
        raise ValueError("nothing to aggregate")
    first = reports[0]
    kw = {"class_names": first.class_names}
    overall = MetricReport.from_counts(_pool(reports), first.average, first.threshold, **kw)
    if group_by:
        groups: dict[str, list[MetricReport]] = defaultdict(list)
        for i, r in enumerate(reports):
            if group_by not in r.tags:
                raise ValueError(f"report {i} has no {group_by!r} tag")
            groups[str(r.tags[group_by])].append(r)
        overall.per_group = {
            g: MetricReport.from_counts(_pool(rs), first.average, first.threshold,
                                        tags={group_by: g}, **kw)
            for g, rs in sorted(groups.items())}
    return overall
