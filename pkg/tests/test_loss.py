import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslide.autodiff import Tensor, backward, tsum
from rdslide.loss import LossConfig, cosine_similarity_map, distill_loss, focal_distill_loss, raw_cosine

from _oracles import focal_loss_oracle, focal_scalar

GRID = np.linspace(0.001, 0.999, 1000)


def loss_value(s, y, alpha, gamma, eps_s=1e-4):
    """Single pixel, single scale, single sample."""
    m = Tensor(np.array([[[s]]], dtype=np.float64))
    return float(focal_distill_loss([m], [y], LossConfig(alpha, gamma, eps_s)).data)


# -- oracle values ------------------------------------------------------------


def test_known_value_normal_branch():
    expected = 0.1 * 0.25 * math.log(2)
    assert abs(loss_value(0.5, 1, 0.1, 2.0) - expected) < 1e-12
    assert round(expected, 6) == 0.017329


def test_known_value_tumor_branch():
    expected = 0.9 * 0.25 * math.log(2)
    assert abs(loss_value(0.5, 0, 0.1, 2.0) - expected) < 1e-12
    # nine times the normal-branch value
    assert round(expected, 6) == 0.155958


@pytest.mark.parametrize("alpha", [0.1, 0.5])
@pytest.mark.parametrize("gamma", [0.0, 2.0])
@pytest.mark.parametrize("y", [0, 1])
def test_matches_scalar_oracle_on_grid(alpha, gamma, y):
    for s in np.linspace(0.01, 0.99, 99):
        assert abs(loss_value(s, y, alpha, gamma) - focal_scalar(s, y, alpha, gamma)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_matches_loop_oracle_on_batches(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    maps = [rng.uniform(0.01, 0.99, (n, s, s)) for s in (8, 4, 2)]
    labels = rng.integers(0, 2, n)
    alpha, gamma = float(rng.choice([0.1, 0.5])), float(rng.choice([0.0, 2.0]))
    got = float(focal_distill_loss([Tensor(m) for m in maps], labels, LossConfig(alpha, gamma)).data)
    assert abs(got - focal_loss_oracle(maps, labels, alpha, gamma)) < 1e-9


def test_gamma_zero_half_alpha_is_half_cross_entropy():
    rng = np.random.default_rng(0)
    s = rng.uniform(0.05, 0.95, (4, 3, 3))
    y = np.array([1, 0, 1, 0])
    st_ = np.where(y[:, None, None] == 1, s, 1 - s)
    expected = 0.5 * np.mean(-np.log(st_).reshape(4, -1).mean(axis=1))
    got = float(focal_distill_loss([Tensor(s)], y, LossConfig(0.5, 0.0)).data)
    assert abs(got - expected) < 1e-12


def test_near_perfect_mimicry_is_near_zero():
    s = np.full((2, 4, 4), 1 - 1e-4)
    val = float(focal_distill_loss([Tensor(s)] * 3, [1, 1], LossConfig()).data)
    assert val / 3 < 1e-3


# -- invariants on the 1000-point grid -------------------------------------------------


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.9])
@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0, 5.0])
def test_case_symmetry(alpha, gamma):
    for s in GRID:
        a = loss_value(s, 0, alpha, gamma)
        b = loss_value(1 - s, 1, 1 - alpha, gamma)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0, 5.0])
def test_monotonicity(gamma):
    normal = [loss_value(s, 1, 0.1, gamma) for s in GRID]
    tumor = [loss_value(s, 0, 0.1, gamma) for s in GRID]
    assert all(b < a for a, b in zip(normal, normal[1:]))
    assert all(b > a for a, b in zip(tumor, tumor[1:]))


def test_focusing_ratio_grows_with_gamma():
    pairs = [(s, s2) for s in GRID[::50] for s2 in GRID[::50] if s < s2]
    for s, s2 in pairs:
        ratios = [loss_value(s, 1, 0.1, g) / loss_value(s2, 1, 0.1, g) for g in (0.0, 1.0, 2.0, 3.0)]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_nonnegative():
    for y in (0, 1):
        for s in GRID:
            assert loss_value(s, y, 0.1, 2.0) >= 0


# -- validation ---------------------------------------------------------------------


def test_rejects_unclamped_maps():
    with pytest.raises(ValueError):
        focal_distill_loss([Tensor(np.ones((1, 2, 2)))], [1])
    with pytest.raises(ValueError):
        focal_distill_loss([Tensor(np.zeros((1, 2, 2)))], [0])


def test_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        focal_distill_loss([Tensor(np.full((1, 2, 2), 0.5))], [2])


@pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(alpha=1.5), dict(gamma=-1.0), dict(eps_s=0.5), dict(eps_s=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad).validate()


def test_alpha_one_allowed_for_normals_only():
    assert LossConfig(alpha=1.0).validate().alpha == 1.0


# -- cosine similarity -------------------------------------------------------------------


def test_self_similarity_clamped():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((2, 5, 3, 3))
    raw = raw_cosine(Tensor(f), Tensor(f)).data
    np.testing.assert_allclose(raw, 1.0, atol=1e-12)
    np.testing.assert_allclose(cosine_similarity_map(f, f, 1e-4).data, 1 - 1e-4, atol=1e-12)


def test_antipodal_similarity():
    f = np.random.default_rng(1).standard_normal((1, 3, 2, 2))
    np.testing.assert_allclose(raw_cosine(Tensor(f), Tensor(-f)).data, -1.0, atol=1e-12)
    np.testing.assert_allclose(cosine_similarity_map(f, -f, 1e-4).data, 1e-4)


def test_cosine_known_value():
    f = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    g = np.array([1.0, 1.0]).reshape(1, 2, 1, 1)
    assert raw_cosine(Tensor(f), Tensor(g)).data[0, 0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_zero_vector_similarity_is_zero():
    f = np.zeros((1, 3, 1, 1))
    g = np.ones((1, 3, 1, 1))
    ft, gt = Tensor(f, requires_grad=True), Tensor(g, requires_grad=True)
    s = raw_cosine(ft, gt)
    assert s.data[0, 0, 0] == 0.0
    backward(tsum(s))
    assert np.all(np.isfinite(ft.grad)) and np.all(np.isfinite(gt.grad))


def test_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        raw_cosine(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_cosine_range_and_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 4, 3, 3))
    g = rng.standard_normal((2, 4, 3, 3))
    s = raw_cosine(Tensor(f), Tensor(g)).data
    assert np.all(np.abs(s) <= 1 + 1e-12)
    np.testing.assert_allclose(raw_cosine(Tensor(f * scale), Tensor(g)).data, s, atol=1e-12)


def test_distill_loss_returns_clamped_maps():
    rng = np.random.default_rng(0)
    tf = [Tensor(rng.standard_normal((2, c, s, s))) for c, s in ((2, 4), (3, 2), (4, 1))]
    sf = [Tensor(rng.standard_normal(t.shape)) for t in tf]
    loss, maps = distill_loss(tf, sf, [1, 0])
    assert float(loss.data) > 0
    for m in maps:
        assert m.data.min() >= 1e-4 and m.data.max() <= 1 - 1e-4
