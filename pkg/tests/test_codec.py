import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seldkit.codec import (PROB_EPS, TrackLabels, best_permutation, decode_predictions, encode_labels,
                           permutations, pit_grad, pit_loss)
from seldkit.events import Event, make_event, relabel_sources, sph_to_cart
from seldkit.oracles import brute_pit_loss, random_labels


def random_events(rng, n_frames=20, n_classes=5, max_poly=3):
    events = []
    for t in range(n_frames):
        for s in range(int(rng.integers(0, max_poly + 1))):
            v = rng.normal(size=3)
            events.append(make_event(t, int(rng.integers(n_classes)), s, v / np.linalg.norm(v)))
    # several sources may share a class in a frame
    return sorted({e.key: e for e in events}.values())


def same_events(a, b):
    a, b = relabel_sources(a), relabel_sources(b)
    assert [e.key for e in a] == [e.key for e in b]
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.doa, y.doa, atol=1e-12)


def test_empty_encodes_to_zero():
    labels, dropped = encode_labels([], 5)
    assert dropped == 0
    assert not labels.sed.any() and not labels.doa.any()
    assert labels.sed.shape == (5, 3, 13)


def test_two_events_use_two_tracks():
    ev = [make_event(0, 2, 0, (1, 0, 0)), make_event(0, 5, 0, (0, 1, 0))]
    labels, dropped = encode_labels(ev, 1)
    assert dropped == 0
    assert labels.sed[0, 0, 2] == 1 and labels.sed[0, 1, 5] == 1
    assert not labels.sed[0, 2].any()
    same_events(decode_predictions(labels), ev)


def test_four_simultaneous_events_drop_one():
    ev = [make_event(3, c, 0, sph_to_cart(30 * c, 0)) for c in range(4)]
    labels, dropped = encode_labels(ev, 5)
    assert dropped == 1
    assert labels.sed[3].sum() == 3
    # the highest (class, source) key is the one dropped
    assert not labels.sed[3, :, 3].any()


def test_non_unit_doa_rejected():
    with pytest.raises(ValueError):
        encode_labels([Event(0, 0, 0, (0.5, 0.0, 0.0))], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip(seed):
    ev = random_events(np.random.default_rng(seed))
    labels, dropped = encode_labels(ev, 20, 3, 5)
    assert dropped == 0
    same_events(decode_predictions(labels), ev)


def test_round_trip_with_probability_targets():
    rng = np.random.default_rng(0)
    ev = random_events(rng)
    labels, _ = encode_labels(ev, 20, 3, 5)
    soft = TrackLabels(np.where(labels.sed > 0, 0.8, 0.1), labels.doa * 2.5)
    same_events(decode_predictions(soft), ev)


def test_decode_threshold():
    pred = TrackLabels(np.full((2, 3, 4), 0.4), np.ones((2, 3, 3)))
    assert decode_predictions(pred) == []
    sed = np.full((1, 3, 4), 0.1)
    sed[0, 0, 2] = 0.9
    doa = np.zeros((1, 3, 3))
    doa[0, 0] = (0, 0, 1)
    assert decode_predictions(TrackLabels(sed, doa)) == [Event(0, 2, 0, (0.0, 0.0, 1.0))]
    with pytest.raises(ValueError):
        decode_predictions(pred, 1.0)


def test_decode_zero_doa_warns():
    sed = np.zeros((1, 1, 2))
    sed[0, 0, 1] = 0.9
    with pytest.warns(RuntimeWarning):
        out = decode_predictions(TrackLabels(sed, np.zeros((1, 1, 3))))
    assert out == [Event(0, 1, 0, (0.0, 0.0, 0.0))]


def test_single_track_loss_is_plain_sum():
    rng = np.random.default_rng(1)
    pred = random_labels(rng, 4, 1, 3, target=False)
    target = random_labels(rng, 4, 1, 3, target=True)
    p = pred.sed
    bce = -np.mean(target.sed * np.log(p) + (1 - target.sed) * np.log(1 - p))
    mse = np.mean((pred.doa - target.doa) ** 2)
    res = pit_loss(pred, target, 0.3)
    assert res.loss == pytest.approx(0.3 * bce + 0.7 * mse, rel=1e-12)
    assert res.loss == pytest.approx(0.3 * res.sed_loss + 0.7 * res.doa_loss, rel=1e-12)


def test_swapped_tracks_are_equivalent():
    rng = np.random.default_rng(2)
    pred = random_labels(rng, 6, 3, 4, target=False)
    target = random_labels(rng, 6, 3, 4, target=True)
    assert pit_loss(pred.permute_tracks([1, 0, 2]), target).loss == pit_loss(pred, target).loss


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([p for p in permutations(3)]))
def test_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    pred = random_labels(rng, 5, 3, 4, target=False)
    target = random_labels(rng, 5, 3, 4, target=True)
    a = pit_loss(pred, target, 0.5).loss
    b = pit_loss(pred.permute_tracks(list(perm)), target, 0.5).loss
    assert abs(a - b) <= 1e-12 * abs(a)


def test_brute_force_small_instance():
    rng = np.random.default_rng(3)
    pred = random_labels(rng, 4, 3, 2, target=False)
    target = random_labels(rng, 4, 3, 2, target=True)
    assert pit_loss(pred, target, 0.5).loss == pytest.approx(brute_pit_loss(pred, target, 0.5), rel=1e-12)


def test_loss_non_negative_and_zero_at_alignment():
    rng = np.random.default_rng(4)
    target = random_labels(rng, 5, 3, 4, target=True)
    pred = TrackLabels(np.clip(target.sed, PROB_EPS, 1 - PROB_EPS), target.doa.copy()).permute_tracks([2, 0, 1])
    res = pit_loss(pred, target, 0.5)
    assert 0 <= res.loss < 1e-6
    other = random_labels(rng, 5, 3, 4, target=False)
    assert pit_loss(other, target).loss > res.loss


def test_best_permutation_rules():
    z = TrackLabels.zeros(1, 3, 4)
    rng = np.random.default_rng(5)
    pred = random_labels(rng, 1, 3, 4, target=False)
    assert best_permutation(pred, z) == (0, 1, 2)
    assert best_permutation(z, z) == (0, 1, 2)
    target = random_labels(rng, 1, 3, 4, target=True)
    target.sed[0] = np.eye(3, 4)
    reversed_pred = TrackLabels(np.clip(target.sed[:, ::-1], 0.01, 0.99), target.doa[:, ::-1].copy())
    perm = best_permutation(reversed_pred, target)
    assert perm == (2, 1, 0)
    assert len(permutations(3)) == 6


def test_shape_and_lambda_errors():
    a = TrackLabels.zeros(2, 3, 4)
    with pytest.raises(ValueError):
        pit_loss(a, TrackLabels.zeros(2, 3, 5))
    with pytest.raises(ValueError):
        pit_loss(a, a, 1.5)


def test_grad_at_target_has_zero_doa_part():
    rng = np.random.default_rng(6)
    target = random_labels(rng, 4, 3, 4, target=True)
    pred = TrackLabels(np.clip(target.sed, 0.2, 0.8), target.doa.copy())
    assert not pit_grad(pred, target).doa.any()


def test_lambda_zero_kills_sed_gradient():
    rng = np.random.default_rng(7)
    pred = random_labels(rng, 4, 3, 4, target=False)
    target = random_labels(rng, 4, 3, 4, target=True)
    assert pit_grad(pred, target, 0.5).sed.any()
    assert not pit_grad(pred, target, 0.0).sed.any()


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    pred = random_labels(rng, 3, 3, 3, target=False)
    target = random_labels(rng, 3, 3, 3, target=True)
    g = pit_grad(pred, target, 0.4)
    h = 1e-5
    for arr, garr in ((pred.sed, g.sed), (pred.doa, g.doa)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = pit_loss(pred, target, 0.4).loss
            arr[idx] = old - h
            down = pit_loss(pred, target, 0.4).loss
            arr[idx] = old
            num = (up - down) / (2 * h)
            assert abs(num - garr[idx]) <= 1e-4 * max(abs(num), abs(garr[idx]), 1e-8)


def test_labels_validation():
    with pytest.raises(ValueError):
        TrackLabels(np.zeros((2, 3, 4)), np.zeros((2, 2, 3)))
