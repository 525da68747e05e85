import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seldkit.assignment import linear_assignment
from seldkit.augment import all_rotations
from seldkit.events import make_event, rotate_events, sph_to_cart
from seldkit.io import read_metadata_csv
from seldkit.metrics import (UNDEFINED_LE, aggregate, angle_matrix, angular_distance, compute_metrics,
                             match_segment, segment_events)
from seldkit.oracles import brute_assignment

DATA = Path(__file__).parent / "data"


def random_events(rng, n_frames=30, n_classes=3, n_sources=4, jitter=15.0):
    events = []
    for s in range(n_sources):
        c = int(rng.integers(n_classes))
        start = int(rng.integers(0, n_frames - 3))
        az, el = rng.uniform(-180, 180), rng.uniform(-60, 60)
        for f in range(start, min(n_frames, start + int(rng.integers(2, 15)))):
            events.append(make_event(f, c, s, sph_to_cart(az + rng.normal() * jitter, el)))
    return events


def noisy(rng, events, deg=12.0, keep=0.8):
    out = []
    for e in events:
        if rng.random() < keep:
            v = np.asarray(e.doa) + rng.normal(size=3) * np.radians(deg)
            out.append(make_event(e.frame, e.class_id, e.source_id, v / np.linalg.norm(v)))
    return out


# --- geometry / matching ---------------------------------------------------

def test_angular_distance_anchors():
    assert angular_distance((1, 0, 0), (1, 0, 0)) == 0.0
    assert angular_distance((1, 0, 0), (0, 1, 0)) == pytest.approx(90.0)
    assert angular_distance((1, 0, 0), (-1, 0, 0)) == pytest.approx(180.0)
    with pytest.raises(ValueError):
        angular_distance((2, 0, 0), (1, 0, 0))


def test_segment_view():
    assert segment_events([]) == {}
    static = [make_event(f, 0, 0, (0, 1, 0)) for f in range(5, 15)]
    view = segment_events(static)
    assert sorted(view) == [(0, 0), (1, 0)]
    np.testing.assert_allclose(view[(0, 0)], [[0, 1, 0]])
    np.testing.assert_allclose(view[(1, 0)], [[0, 1, 0]])
    moving = [make_event(f, 0, 0, sph_to_cart(f * 1.0, 0)) for f in range(10)]
    mean = np.mean([sph_to_cart(f * 1.0, 0) for f in range(10)], axis=0)
    np.testing.assert_allclose(segment_events(moving)[(0, 0)][0], mean / np.linalg.norm(mean))


def test_match_semantics():
    v = [sph_to_cart(a, 0) for a in (0, 90)]
    res = match_segment(v, v)
    assert (res.tp, res.fp, res.fn, res.errors) == (2, 0, 0, [0.0, 0.0])
    res = match_segment([sph_to_cart(0, 0)], [sph_to_cart(25, 0)], 20)
    assert (res.tp, res.fp, res.fn) == (0, 1, 1)
    assert res.errors == [pytest.approx(25.0)]


def test_crossed_pairs_use_optimal_matching():
    refs = [sph_to_cart(0, 0), sph_to_cart(40, 0)]
    preds = [sph_to_cart(35, 0), sph_to_cart(5, 0)]
    res = match_segment(refs, preds)
    cost = angle_matrix(refs, preds)
    best = min(cost[0, p[0]] + cost[1, p[1]] for p in itertools.permutations(range(2)))
    assert sum(res.errors) == pytest.approx(best)
    assert res.tp == 2


def test_assignment_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = rng.integers(0, 6, 2)
        cost = rng.random((n, m)) * 180
        r, c = linear_assignment(cost)
        assert len(r) == min(n, m) and len(set(c)) == len(c)
        assert cost[r, c].sum() == pytest.approx(brute_assignment(cost), abs=1e-9)


def test_assignment_rejects_nan():
    with pytest.raises(ValueError):
        linear_assignment(np.array([[np.nan]]))


# --- the hand-worked fixture ----------------------------------------------

def fixture_reports():
    ref = read_metadata_csv(DATA / "fixture_ref.csv")
    pred = read_metadata_csv(DATA / "fixture_pred.csv")
    return (compute_metrics(ref, pred, 20.0, "macro", n_classes=2),
            compute_metrics(ref, pred, 20.0, "micro", n_classes=2))


def test_fixture_table():
    expected = json.loads((DATA / "fixture_expected.json").read_text())
    macro, micro = fixture_reports()
    for row, want in zip(macro.per_class(), expected["per_class"]):
        for key in ("n_ref", "tp", "fp", "fn", "subs", "dels", "ins"):
            assert row["counts"][key] == want[key], (row["class"], key)
        for key in ("er", "f", "le", "lr"):
            assert row[key] == pytest.approx(want[key], abs=1e-12), (row["class"], key)
    for rep, want in ((macro, expected["macro"]), (micro, expected["micro"])):
        for key in ("er", "f", "le", "lr"):
            assert getattr(rep, key) == pytest.approx(want[key], abs=1e-12), key
    assert macro.summary_line() == expected["macro_line"]


# --- report semantics ------------------------------------------------------

def test_perfect_and_empty():
    rng = np.random.default_rng(1)
    ref = random_events(rng)
    rep = compute_metrics(ref, ref)
    assert (rep.er, rep.f, rep.le, rep.lr) == (0.0, 1.0, 0.0, 1.0)
    assert rep.summary_line() == "ER 0.00  F 100.0%  LE 0.0°  LR 100.0%"
    empty = compute_metrics(ref, [])
    assert (empty.er, empty.f, empty.lr) == (1.0, 0.0, 0.0)
    assert empty.le == UNDEFINED_LE and not empty.le_defined


def test_class_without_refs_is_excluded_from_macro():
    ref = [make_event(0, 0, 0, (1, 0, 0))]
    pred = ref + [make_event(0, 1, 0, (0, 1, 0))]
    rep = compute_metrics(ref, pred, n_classes=2)
    assert rep.er == 0.0 and rep.f == 1.0
    row = rep.per_class()[1]
    assert row["counts"]["fp"] == 1 and not row["in_macro"] and row["er"] is None


def test_duration_mismatch_and_bad_class():
    ref = [make_event(12, 0, 0, (1, 0, 0))]
    with pytest.raises(ValueError, match="duration"):
        compute_metrics(ref, ref, n_frames=10)
    with pytest.raises(ValueError):
        compute_metrics([make_event(0, 5, 0, (1, 0, 0))], [], n_classes=3)
    with pytest.raises(ValueError):
        compute_metrics(ref, ref, average="weighted")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds_and_order_freedom(seed):
    rng = np.random.default_rng(seed)
    ref = random_events(rng)
    pred = noisy(rng, ref) + noisy(rng, random_events(rng), keep=0.3)
    rep = compute_metrics(ref, pred, n_classes=3)
    assert rep.er >= 0 and 0 <= rep.f <= 1 and 0 <= rep.lr <= 1 and 0 <= rep.le <= 180
    shuffled = list(pred)
    rng.shuffle(shuffled)
    assert compute_metrics(ref, shuffled, n_classes=3).to_dict() == rep.to_dict()


@pytest.mark.parametrize("r", range(16))
def test_rotation_invariance(r):
    rng = np.random.default_rng(100 + r)
    ref = random_events(rng)
    pred = noisy(rng, ref, deg=20.0)
    m = all_rotations()[r]
    a = compute_metrics(ref, pred, n_classes=3)
    b = compute_metrics(rotate_events(ref, m), rotate_events(pred, m), n_classes=3)
    for key in ("er", "f", "le", "lr"):
        x, y = getattr(a, key), getattr(b, key)
        assert (math.isnan(x) and math.isnan(y)) or abs(x - y) <= 1e-9


def test_micro_equals_macro_for_identical_classes():
    base = [make_event(f, 0, 0, sph_to_cart(10, 0)) for f in range(20)]
    pred = [make_event(f, 0, 0, sph_to_cart(25, 0)) for f in range(10)]
    ref = base + [make_event(e.frame, 1, 0, e.doa) for e in base]
    pr = pred + [make_event(e.frame, 1, 0, e.doa) for e in pred]
    a, b = compute_metrics(ref, pr, average="macro"), compute_metrics(ref, pr, average="micro")
    for key in ("er", "f", "le", "lr"):
        assert getattr(a, key) == pytest.approx(getattr(b, key))


def test_hungarian_beats_random_assignments():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, m = rng.integers(1, 7, 2)
        cost = angle_matrix(*(x / np.linalg.norm(x, axis=1, keepdims=True)
                              for x in (rng.normal(size=(n, 3)), rng.normal(size=(m, 3)))))
        r, c = linear_assignment(cost)
        best = cost[r, c].sum()
        k = min(n, m)
        for _ in range(200):
            rows = rng.permutation(n)[:k]
            cols = rng.permutation(m)[:k]
            assert best <= cost[rows, cols].sum() + 1e-9


# --- aggregation -----------------------------------------------------------

def test_single_group_equals_concatenation():
    rng = np.random.default_rng(3)
    clips = [(random_events(rng), None) for _ in range(3)]
    clips = [(ref, noisy(rng, ref)) for ref, _ in clips]
    reports = [compute_metrics(r, p, n_classes=3, tags={"room": "a"}) for r, p in clips]
    offset = lambda evs, k: [make_event(e.frame + 30 * k, e.class_id, e.source_id, e.doa) for e in evs]
    ref_all = [e for k, (r, _) in enumerate(clips) for e in offset(r, k)]
    pred_all = [e for k, (_, p) in enumerate(clips) for e in offset(p, k)]
    whole = compute_metrics(ref_all, pred_all, n_classes=3)
    agg = aggregate(reports, "room")
    for key in ("er", "f", "le", "lr"):
        assert getattr(agg, key) == pytest.approx(getattr(whole, key), abs=1e-12)
        assert getattr(agg.per_group["a"], key) == pytest.approx(getattr(whole, key), abs=1e-12)


def test_identical_clips_in_two_groups():
    rng = np.random.default_rng(4)
    ref = random_events(rng)
    pred = noisy(rng, ref)
    reps = [compute_metrics(ref, pred, tags={"room": g}) for g in ("x", "y")]
    agg = aggregate(reps, "room")
    assert agg.per_group["x"].to_dict()["per_class"] == agg.per_group["y"].to_dict()["per_class"]


def test_pooling_differs_from_ratio_averaging():
    ref_big = [make_event(f, 0, s, sph_to_cart(40 * s, 0)) for f in range(10) for s in range(3)]
    ref_small = [make_event(0, 0, 0, (1, 0, 0))]
    reps = [compute_metrics(ref_big, ref_big, tags={"room": "a"}),
            compute_metrics(ref_small, [], tags={"room": "a"})]
    pooled = aggregate(reps, "room")
    assert pooled.er == pytest.approx(1 / 4)
    assert np.mean([r.er for r in reps]) == pytest.approx(0.5)


def test_missing_tag():
    rep = compute_metrics([make_event(0, 0, 0, (1, 0, 0))], [])
    with pytest.raises(ValueError, match="room"):
        aggregate([rep], "room")
