import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nap import diffcore as dc
from nap.distribution import BucketSpec, density, expected_improvement, log_prob, log_prob_tensor, make_buckets


def test_make_buckets_examples():
    np.testing.assert_allclose(make_buckets([0, 1], 2, 0.0).boundaries, [0, 0.5, 1])
    spec = make_buckets([0.5], 4, 0.0)
    assert (spec.lower, spec.upper) == (0.0, 1.0)
    np.testing.assert_allclose(spec.widths, 0.25)
    spec = make_buckets([0, 10], 1000, 0.1)
    assert spec.lower == pytest.approx(-1.0) and spec.upper == pytest.approx(11.0)


def test_make_buckets_errors():
    with pytest.raises(ValueError):
        make_buckets([], 3)
    with pytest.raises(ValueError):
        make_buckets([0, np.inf], 3)
    with pytest.raises(ValueError):
        make_buckets([0, 1], 3, -0.1)
    with pytest.raises(ValueError):
        BucketSpec(1.0, 1.0, 3)


def test_log_prob_examples():
    unit = BucketSpec(0.0, 1.0, 1000)
    assert log_prob(np.zeros(1000), 0.3712, unit) == pytest.approx(0.0, abs=1e-12)
    two = BucketSpec(0.0, 1.0, 2)
    logits = np.array([np.log(3.0), 0.0])
    assert log_prob(logits, 0.2, two) == pytest.approx(0.405465, abs=1e-6)
    assert log_prob(logits, 0.5, two) == pytest.approx(-0.693147, abs=1e-6)
    assert log_prob(logits, 1.0, two) == pytest.approx(-0.693147, abs=1e-6)  # last bucket closed


def test_log_prob_out_of_support():
    with pytest.raises(ValueError):
        log_prob(np.zeros(2), 1.01, BucketSpec(0.0, 1.0, 2))


def test_log_prob_tensor_matches_numpy(rng):
    spec = BucketSpec(-0.1, 1.1, 16)
    logits = rng.normal(size=(3, 4, 16))
    y = rng.uniform(0, 1, size=(3, 4))
    np.testing.assert_allclose(log_prob_tensor(dc.Tensor(logits), y, spec).data, log_prob(logits, y, spec), atol=1e-12)


def test_expected_improvement_examples():
    unit = BucketSpec(0.0, 1.0, 10)
    assert expected_improvement(np.zeros(10), unit, 0.5) == pytest.approx(0.125, abs=1e-12)
    assert expected_improvement(np.zeros(10), unit, 0.53) == pytest.approx(0.47 ** 2 / 2, abs=1e-12)
    assert expected_improvement(np.zeros(10), unit, 1.0) == 0.0
    assert expected_improvement(np.zeros(10), unit, 3.0) == 0.0
    spec = BucketSpec(0.0, 4.0, 4)  # buckets (0,1) (1,2) (2,3) (3,4)
    logits = np.full(4, -1e9)
    logits[1] = 0.0
    assert expected_improvement(logits, spec, 0.0) == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_density_integrates_to_one(count, seed):
    r = np.random.default_rng(seed)
    spec = BucketSpec(-r.uniform(0, 2), r.uniform(0.1, 3), count)
    logits = r.normal(scale=3, size=count)
    lp = log_prob(np.broadcast_to(logits, (count, count)), spec.centers, spec)
    assert abs((np.exp(lp) * spec.widths).sum() - 1.0) < 1e-9
    assert abs((density(logits, spec) * spec.widths).sum() - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_log_prob_shift_invariant(seed, shift):
    r = np.random.default_rng(seed)
    spec = BucketSpec(0.0, 1.0, 7)
    logits = r.normal(size=7)
    y = r.uniform()
    assert log_prob(logits + shift, y, spec) == pytest.approx(log_prob(logits, y, spec), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ei_monotone_nonnegative(seed):
    r = np.random.default_rng(seed)
    spec = BucketSpec(0.0, 1.0, 12)
    logits = r.normal(scale=2, size=12)
    bests = np.sort(r.uniform(-0.5, 1.5, size=10))
    ei = [expected_improvement(logits, spec, b) for b in bests]
    assert all(e >= 0 for e in ei)
    assert all(a >= b - 1e-15 for a, b in zip(ei, ei[1:]))


def test_ei_matches_quadrature(rng):
    spec = BucketSpec(-0.1, 1.1, 20)
    logits = rng.normal(size=20)
    best = 0.37
    grid = np.linspace(spec.lower, spec.upper, 1_000_001)
    mid = 0.5 * (grid[1:] + grid[:-1])
    dens = density(logits, spec)[np.minimum(spec.bucket_index(mid), spec.count - 1)]
    quad = float((np.maximum(mid - best, 0) * dens * np.diff(grid)).sum())
    assert expected_improvement(logits, spec, best) == pytest.approx(quad, abs=1e-6)
