import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocut.core import Dataset, InputError
from geocut.randoracle import RandomOracle
from geocut.weights import (
    check_compatibility,
    compatibility_ratio,
    compatible_transform,
    dynamic_weight_oracle,
    exact_weights,
    sketch_words,
    sketched_weights,
)

from conftest import oracle, random_instance


def naive_ratio(pts, w, p):
    n = len(pts)
    dist = lambda a, b: sum(abs(x - y) ** p for x, y in zip(a, b)) ** (1 / p)
    worst = 0.0
    for i in range(n):
        deg = sum(dist(pts[i], pts[k]) for k in range(n))
        for j in range(n):
            dij = dist(pts[i], pts[j])
            if dij > 0:
                worst = max(worst, dij / (w[j] * deg))
    return worst


def test_exact_weights_example():
    ds = Dataset(np.array([[0.0], [1.0], [3.0]]))
    # degrees 4, 3, 5 over total 12
    assert np.allclose(exact_weights(ds).w, [4 / 12, 3 / 12, 5 / 12])
    assert exact_weights(ds).w.sum() == pytest.approx(1.0)


def test_zero_total_refused():
    with pytest.raises(InputError, match="zero total distance"):
        exact_weights(Dataset(np.ones((4, 2))))


def test_sketched_sandwich(rng):
    ds = random_instance(rng, 15, 3)
    true = exact_weights(ds).w
    sw = sketched_weights(ds, 0.25, 0.1, oracle(1))
    assert np.all(sw.w >= true) and np.all(sw.w <= 1.25 * true + 1e-15)
    assert sw.sandwich == 1.25
    assert sketched_weights(ds, 0.0, 0.1, oracle(1)).w.tolist() == true.tolist()
    with pytest.raises(InputError):
        sketched_weights(ds, 1.0, 0.1, oracle(1))


def test_sketch_failure_rate():
    ds = Dataset(np.array([[0.0], [1.0]]))
    fails = sum(sketched_weights(ds, 0.5, 0.2, oracle(i, "sf")).failed for i in range(2000))
    assert abs(fails / 2000 - 0.2) < 3 * math.sqrt(0.2 * 0.8 / 2000)


def test_dynamic_weights_range(rng):
    ds = random_instance(rng, 10, 2)
    true = exact_weights(ds).w
    w = dynamic_weight_oracle(ds, 3.0, oracle(2)).w
    assert np.all(w >= true) and np.all(w <= 3 * true)
    with pytest.raises(InputError):
        dynamic_weight_oracle(ds, 0.5, oracle(2))


def test_transform_lambda_rule():
    wv = exact_weights(Dataset(np.array([[0.0], [2.0], [5.0]])))
    assert compatible_transform(wv).lam == 8.0
    from dataclasses import replace
    assert compatible_transform(replace(wv, sandwich=3.0)).lam == 12.0
    assert compatible_transform(wv, lam=60).lam == 60.0
    assert np.allclose(compatible_transform(wv).w, wv.w / 2)


def test_ratio_matches_naive(rng):
    for p in (1.0, 2.0, 3.0):
        ds = random_instance(rng, 8, 2, p)
        w = rng.uniform(0.05, 0.5, 8)
        assert compatibility_ratio(ds, w) == pytest.approx(naive_ratio(ds.points.tolist(), w, p), rel=1e-12)


def test_ratio_zero_weight_is_infinite():
    ds = Dataset(np.array([[0.0], [1.0]]))
    assert compatibility_ratio(ds, [0.5, 0.0]) == math.inf


def test_halved_exact_weights_are_8_compatible(rng):
    # d(x,y) <= (deg(x) + deg(y)) / n and the averaging bound give ratio <= 4 for halved weights
    for _ in range(100):
        ds = random_instance(rng, int(rng.integers(2, 12)), int(rng.integers(1, 4)), float(rng.choice([1.0, 2.0])))
        ok, r = check_compatibility(ds, compatible_transform(exact_weights(ds)).w, 8.0)
        assert ok, r


def test_sketch_words_formula():
    assert sketch_words(100, 2, 0.5, 0.01) == math.ceil((math.log2(20000) / 0.5) ** 2)
    assert sketch_words(1, 1, 1.0, 10.0) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10 ** 6))
def test_sketched_weights_still_compatible(n, seed):
    r = np.random.default_rng(seed)
    ds = random_instance(r, n, 2)
    sw = compatible_transform(sketched_weights(ds, 0.5, 0.1, RandomOracle(seed.to_bytes(16, "little"))))
    assert check_compatibility(ds, sw.w, sw.lam)[0]
