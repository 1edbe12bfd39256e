import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import numeric_grad
from vnaw.config import ConfigError
from vnaw.loss import NawParams, batch_loss, cross_entropy, naw_ce_loss, naw_weight


def simplex(k):
    return st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k).map(lambda v: np.array(v) / np.sum(v))


def test_ce_perfect_confidence():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0


def test_ce_half():
    assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2), abs=1e-15)


def test_ce_clamp():
    v = cross_entropy(np.array([1e-20, 1 - 1e-20]), 0)
    assert v == pytest.approx(-math.log(1e-12), abs=1e-12)
    assert v == pytest.approx(27.631, abs=1e-3)


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.array([0.5, 0.5]), 2)
    with pytest.raises(ValueError):
        cross_entropy(np.array([0.5, 0.5]), -1)


def test_weight_peak_is_norm_const():
    naw = NawParams.create(8, sigma=0.2)
    assert naw_weight(naw.mu, naw) == naw.norm_const
    # (2*pi*sqrt(det(0.04 I_8)))^-1 = 1 / (2*pi*0.2**8)
    assert naw.norm_const == pytest.approx(1 / (2 * math.pi * 0.2**8), rel=1e-14)
    assert naw.norm_const == pytest.approx(6.2e4, rel=0.01)


def test_weight_worked_example_k2():
    naw = NawParams.create(2, sigma=0.5)
    c = 1 / (2 * math.pi * 0.25)
    assert naw.norm_const == pytest.approx(0.63662, abs=1e-5)
    # independent scalar evaluation: quadratic form (0.4^2 + 0.4^2) / 0.25 = 1.28
    expected = c * math.exp(-0.5 * 1.28)
    assert naw_weight(np.array([0.9, 0.1]), naw) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.335685, abs=1e-6)


@settings(max_examples=200)
@given(simplex(5), simplex(5))
def test_weight_monotone_in_distance(p1, p2):
    naw = NawParams.create(5, sigma=0.3)
    d1, d2 = np.sum((p1 - naw.mu) ** 2), np.sum((p2 - naw.mu) ** 2)
    w1, w2 = naw_weight(p1, naw), naw_weight(p2, naw)
    assert 0 < w1 <= naw.norm_const and 0 < w2 <= naw.norm_const
    if d1 < d2 and abs(w1 - w2) > 1e-12 * naw.norm_const:
        assert w1 > w2


@given(simplex(4))
def test_weight_permutation_symmetric_under_uniform_mu(p):
    naw = NawParams.create(4, sigma=0.25)
    w = naw_weight(p, naw)
    for perm in itertools.permutations(range(4)):
        assert naw_weight(p[list(perm)], naw) == w


def test_weight_increases_towards_uniform():
    k = 6
    naw = NawParams.create(k, sigma=0.2)
    onehot = np.eye(k)[0]
    ts = np.linspace(0, 1, 50)
    ws = [naw_weight((1 - t) * onehot + t * naw.mu, naw) for t in ts]
    entropies = [-(p * np.log(np.maximum(p, 1e-300))).sum() for p in ((1 - t) * onehot + t * naw.mu for t in ts)]
    assert np.all(np.diff(ws) > 0) and np.all(np.diff(entropies) > 0)


def test_weight_cap():
    naw = NawParams.create(8, sigma=0.2, weight_cap=10.0)
    assert naw_weight(naw.mu, naw) == 10.0
    assert naw.max_weight == 10.0


def test_cap_zero_gives_plain_ce():
    naw = NawParams.create(3, weight_cap=0.0)
    p = np.array([0.2, 0.5, 0.3])
    out = naw_ce_loss(p, 1, naw)
    assert out.value == cross_entropy(p, 1)
    np.testing.assert_array_equal(out.grad, naw_ce_loss(p, 1, None).grad)


def test_naw_ce_worked_example():
    naw = NawParams.create(2, sigma=0.5)
    out = naw_ce_loss(np.array([0.5, 0.5]), 0, naw)
    assert out.weight == pytest.approx(2 / math.pi, rel=1e-14)
    assert out.value == pytest.approx((1 + 2 / math.pi) * math.log(2), rel=1e-14)
    assert out.value == pytest.approx(1.13444, abs=1e-4)


@given(simplex(4), st.integers(0, 3))
def test_naw_ce_at_least_ce_with_exact_ratio(p, y):
    naw = NawParams.create(4, sigma=0.3)
    ce = cross_entropy(p, y)
    out = naw_ce_loss(p, y, naw)
    assert out.value >= ce
    assert out.value == pytest.approx((1 + naw_weight(p, naw)) * ce, rel=1e-15)


def test_detached_gradient_matches_fd():
    naw = NawParams.create(4, sigma=0.3)
    p = np.array([0.1, 0.4, 0.3, 0.2])
    out = naw_ce_loss(p, 2, naw)
    w0 = float(out.weight)
    x = p.copy()
    numeric = numeric_grad(lambda: (1 + w0) * -math.log(x[2]), x)
    np.testing.assert_allclose(out.grad, numeric, rtol=1e-8)
    np.testing.assert_allclose(out.grad, (1 + w0) * naw_ce_loss(p, 2, None).grad, rtol=1e-15)


def test_batch_mean():
    naw = NawParams.create(3)
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=10)
    y = rng.integers(0, 3, size=10)
    per = [float(naw_ce_loss(p[i], y[i], naw).value) for i in range(10)]
    out = batch_loss(p, y, naw)
    assert out.value == pytest.approx(np.mean(per), rel=1e-14)
    np.testing.assert_allclose(out.grad[4], naw_ce_loss(p[4], y[4], naw).grad / 10, rtol=1e-14)


def test_naw_params_validation():
    with pytest.raises(ConfigError, match="singular"):
        NawParams.create(3, sigma=0.0)
    with pytest.raises(ConfigError):
        NawParams.create(3, mu="0.5,0.5")
    with pytest.raises(ConfigError):
        NawParams.create(3, weight_cap=-1)
    with pytest.raises(ConfigError):
        NawParams.create(200, sigma=1e-3)  # constant overflows
    naw = NawParams.create(3, mu="0.2,0.3,0.5")
    np.testing.assert_array_equal(naw.mu, [0.2, 0.3, 0.5])
