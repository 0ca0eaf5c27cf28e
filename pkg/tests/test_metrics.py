import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslide.metrics import (
    FP_TARGETS,
    accuracy,
    auroc,
    calibrate_miou_threshold,
    calibrate_threshold,
    froc,
    lesion_set,
    miou_2class,
    nms_candidates,
    pixel_auroc,
    pooled_miou,
    quantile_thresholds,
)

from _oracles import FROC_TABLE, auroc_pairs, froc_fixture, miou_sets


# -- accuracy -------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([1] * 7 + [0] * 3, [1] * 10) == 0.7


def test_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        accuracy([1, 0], [1])


# -- AUROC ------------------------------------------------------------------------


def test_auroc_perfect_and_all_ties():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_single_class_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(100))
def test_auroc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 30
    # coarse rounding forces plenty of ties
    scores = np.round(rng.random(n), 1 if seed % 2 else 3)
    truths = rng.integers(0, 2, n)
    truths[0], truths[1] = 0, 1
    assert abs(auroc(scores, truths) - auroc_pairs(scores, truths)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auroc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(40)
    t = np.arange(40) % 2
    base = auroc(s, t)
    assert auroc(np.exp(3 * s) + 2, t) == pytest.approx(base, abs=1e-12)
    assert auroc(np.arctan(s), t) == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auroc_flipped_truths(seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(50).astype(float)  # no ties
    t = rng.integers(0, 2, 50)
    t[:2] = (0, 1)
    assert auroc(s, 1 - t) == pytest.approx(1 - auroc(s, t), abs=1e-12)


# -- pixel AUROC --------------------------------------------------------------------


def test_pixel_auroc_examples():
    m = np.zeros((6, 6), np.uint8)
    m[1:3, 2:5] = 1
    assert pixel_auroc(m.astype(float), m) == 1.0
    assert pixel_auroc(np.full((6, 6), 0.3), m) == 0.5


@pytest.mark.parametrize("seed", range(100))
def test_pixel_auroc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    h = np.round(rng.random((8, 8)), 2)
    m = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    m[0, 0], m[0, 1] = 1, 0
    if seed % 3 == 0:
        h[rng.random((8, 8)) < 0.2] = np.nan
        h[0, 0], h[0, 1] = 0.5, 0.4
    keep = np.isfinite(h)
    assert abs(pixel_auroc(h, m) - auroc_pairs(h[keep], m[keep])) < 1e-12


def test_pixel_auroc_pools_several_maps():
    rng = np.random.default_rng(0)
    hs = [rng.random((4, 4)) for _ in range(3)]
    ms = [(rng.random((4, 4)) < 0.4) for _ in range(3)]
    pooled = auroc_pairs(np.concatenate([h.ravel() for h in hs]), np.concatenate([m.ravel() for m in ms]))
    assert abs(pixel_auroc(hs, ms) - pooled) < 1e-12


def test_pixel_auroc_single_class_rejected():
    with pytest.raises(ValueError):
        pixel_auroc(np.random.default_rng(0).random((4, 4)), np.ones((4, 4)))


# -- mIoU ------------------------------------------------------------------------


def test_miou_identical_and_complement():
    m = np.zeros((4, 4), bool)
    m[:2] = True
    assert miou_2class(m, m) == 1.0
    assert miou_2class(~m, m) == 0.0


def test_miou_half_covered_quarter_region():
    truth = np.zeros((4, 4), bool)
    truth[:2, :2] = True  # a quarter of the image
    pred = np.zeros((4, 4), bool)
    pred[:1, :2] = True  # half of the truth region, nothing else
    # IoU anomaly = 2/4, IoU normal = 12/14
    expected = (2 / 4 + 12 / 14) / 2
    assert miou_2class(pred, truth) == pytest.approx(expected, abs=1e-15)
    assert miou_2class(pred, truth) == pytest.approx(miou_sets(pred, truth), abs=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_miou_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((4, 4)) < rng.random()
    truth = rng.random((4, 4)) < rng.random()
    assert abs(miou_2class(pred, truth) - miou_sets(pred, truth)) < 1e-15
    assert miou_2class(~pred, ~truth) == pytest.approx(miou_2class(pred, truth), abs=1e-15)


def test_miou_absent_class_counts_one():
    z = np.zeros((3, 3), bool)
    assert miou_2class(z, z) == 1.0


def test_miou_shape_mismatch():
    with pytest.raises(ValueError):
        miou_2class(np.zeros((2, 2)), np.zeros((2, 3)))


# -- lesions and candidates --------------------------------------------------------


def test_lesion_set_eight_connectivity():
    m = np.zeros((5, 5), np.uint8)
    m[0, 0] = m[1, 1] = 1  # diagonal neighbours: one lesion
    m[3:5, 3:5] = 1
    ls = lesion_set([m])
    assert ls.counts == [2]
    lab = ls.labels[0]
    assert lab[0, 0] == lab[1, 1] != lab[4, 4]
    # components partition the mask
    assert np.array_equal(lab > 0, m > 0)


def test_nms_picks_peaks_and_suppresses():
    h = np.zeros((20, 20))
    h[5, 5], h[5, 7], h[15, 15] = 3.0, 2.0, 1.0
    c = nms_candidates(h, radius=4, max_candidates=3)
    assert c[:2, :2].tolist() == [[5, 5], [15, 15]]
    assert c[0, 2] == 3.0 and c[1, 2] == 1.0


def test_nms_skips_nan():
    h = np.full((5, 5), np.nan)
    h[2, 3] = 0.5
    c = nms_candidates(h, radius=1)
    assert c.tolist() == [[3, 2, 0.5]]


# -- FROC --------------------------------------------------------------------------


def test_froc_matches_hand_computed_fixture():
    masks, cands = froc_fixture()
    r = froc(cands, lesion_set(masks))
    assert r.thresholds.tolist() == FROC_TABLE["thresholds"]
    assert r.fps.tolist() == FROC_TABLE["fps"]
    assert r.sensitivity.tolist() == FROC_TABLE["sensitivity"]
    assert r.at_targets.tolist() == FROC_TABLE["at_targets"]
    assert r.score == FROC_TABLE["score"]
    assert r.fp_targets == FP_TARGETS


def test_froc_single_hit():
    m = np.zeros((4, 4), np.uint8)
    m[1, 1] = 1
    r = froc([np.array([(1, 1, 0.9)])], [m])
    assert r.sensitivity[1] == 1.0 and r.fps[1] == 0.0
    assert r.score == 1.0


def test_froc_only_false_positives():
    m = np.zeros((6, 6), np.uint8)
    m[0, 0] = 1
    r = froc([np.array([(5, 5, 0.9), (3, 3, 0.5)])], [m])
    assert not r.sensitivity.any() and r.score == 0.0


def test_froc_no_lesions_rejected():
    with pytest.raises(ValueError):
        froc([np.zeros((0, 3))], [np.zeros((3, 3))])


def test_froc_double_hit_counts_once():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    r = froc([np.array([(0, 0, 0.9), (1, 1, 0.8)])], [m])
    assert r.sensitivity.tolist() == [0.0, 1.0, 1.0]
    assert r.fps.tolist() == [0.0, 0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_froc_sensitivity_non_decreasing(seed):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((12, 12)) < 0.15).astype(np.uint8) for _ in range(3)]
    masks[0][0, 0] = 1
    cands = [np.column_stack([rng.integers(0, 12, (8, 2)), rng.random(8)]) for _ in range(3)]
    r = froc(cands, masks)
    assert np.all(np.diff(r.sensitivity) >= 0) and np.all(np.diff(r.fps) >= 0)
    assert np.all(np.diff(r.at_targets) >= 0)


def _froc_bruteforce(cands, masks, targets):
    """Threshold sweep by direct re-counting at every candidate score."""
    ls = lesion_set(masks)
    scores = sorted({float(c[2]) for cs in cands for c in cs}, reverse=True)
    points = [(0.0, 0.0)]
    for thr in scores:
        hits, fp = set(), 0
        for s, cs in enumerate(cands):
            for x, y, sc in cs:
                if sc >= thr:
                    lid = ls.labels[s][int(y), int(x)]
                    if lid:
                        hits.add((s, lid))
                    else:
                        fp += 1
        points.append((fp / len(masks), len(hits) / ls.total))
    return [max(se for f, se in points if f <= t) for t in targets]


@pytest.mark.parametrize("seed", range(100))
def test_froc_matches_bruteforce_sweep(seed):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((10, 10)) < 0.2).astype(np.uint8) for _ in range(2)]
    masks[1][5, 5] = 1
    cands = [np.column_stack([rng.integers(0, 10, (6, 2)), np.round(rng.random(6), 1)]) for _ in range(2)]
    r = froc(cands, masks)
    assert r.at_targets.tolist() == _froc_bruteforce(cands, masks, FP_TARGETS)


# -- calibration ---------------------------------------------------------------------


def test_quantile_thresholds_count():
    q = quantile_thresholds(np.arange(11.0))
    assert len(q) == 101 and q[0] == 0 and q[-1] == 10


def test_calibrate_threshold_separable():
    s = np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9])
    t = np.array([0, 0, 0, 1, 1, 1])
    thr, acc = calibrate_threshold(s, t)
    assert acc == 1.0 and 0.3 <= thr < 0.7


def test_calibrate_threshold_ties_go_lower():
    # every threshold in [0.3, 0.7) separates perfectly; the lowest candidate wins
    s = np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9])
    t = np.array([0, 0, 0, 1, 1, 1])
    thr, _ = calibrate_threshold(s, t)
    candidates = quantile_thresholds(s)
    best = [c for c in candidates if np.mean((s > c) == t) == 1.0]
    assert thr == min(best)


def test_calibrate_threshold_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    s = rng.random(200)
    t = (s + 0.4 * rng.standard_normal(200)) > 0.5
    thr, acc = calibrate_threshold(s, t)
    cands = quantile_thresholds(s)
    accs = [np.mean((s > c) == t) for c in cands]
    assert acc == max(accs)
    assert thr == cands[int(np.argmax(accs))]


def test_miou_threshold_calibration():
    h = np.zeros((8, 8))
    h[2:5, 2:5] = 1.0
    h += np.linspace(0, 0.1, 64).reshape(8, 8)
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 2:5] = 1
    thr, best = calibrate_miou_threshold([h], [m])
    assert best == 1.0
    assert pooled_miou([h], [m], thr) == 1.0
    assert math.isfinite(thr)
