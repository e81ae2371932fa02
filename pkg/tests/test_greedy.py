import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocut.core import Dataset, InputError, brute_force_opt, distance
from geocut.greedy import (
    AssignEngine,
    SummaryEntry,
    TimelineMaskSummary,
    assign,
    build_summary,
    compute_params,
    explicit_params,
    greedy_process_oracle,
    parse_weight_mode,
    point_keys,
    run_reference_pipeline,
    seed_bits_from_int,
)
from geocut.randoracle import RandomOracle
from geocut.weights import compatible_transform, exact_weights

from conftest import oracle, random_instance


def two_node_summary():
    a = SummaryEntry((0.0,), 0, 1, 0.5, 1)
    b = SummaryEntry((10.0,), 0, 2, 0.5, 2)
    return TimelineMaskSummary([b, a], t0=2, gamma=1.0, t_e=10)


def test_compute_params_frozen():
    p = compute_params(12, 0.2, 8)
    assert (p.t_e, p.t0, p.t0_formula) == (480, 480, 1435)
    assert p.gamma == pytest.approx(10292.641412907304, rel=1e-14)
    assert p.clamped
    p = compute_params(50, 0.5, 8)
    assert (p.t_e, p.t0) == (800, 246)
    assert p.gamma == pytest.approx(1889.7042369603662, rel=1e-14)
    assert not p.clamped


def test_compute_params_independent_formula():
    for n, eps, lam in [(5, 0.3, 8), (100, 0.1, 12), (1000, 0.9, 60)]:
        te = -(-n * lam // eps)
        g = (math.log(te) + 1) ** 2 * lam / eps ** 2
        t0 = min(math.ceil(max(math.sqrt(g * lam) / eps, 1 / eps)), te)
        p = compute_params(n, eps, lam)
        assert (p.t_e, p.t0) == (te, t0) and p.gamma == pytest.approx(g)


def test_params_validation():
    with pytest.raises(InputError):
        compute_params(10, 1.0, 8)
    with pytest.raises(InputError):
        compute_params(1, 0.5, 8)
    with pytest.raises(InputError):
        explicit_params(10, 5, 2.0)


def test_hand_summary_assign():
    s = two_node_summary()
    assert [e.ell for e in s.entries] == [1, 2]
    assert s.seed_order == [((0.0,), 0), ((10.0,), 0)] and s.m == 2
    # x=1: C(side of a) = 1/0.5 = 2, C(side of b) = 9/0.5 = 18, joins a
    assert assign((1.0,), 5, [0, 1], s, p=2.0) == (1, 0)
    assert assign((1.0,), 5, [1, 0], s, p=2.0) == (0, 1)
    assert assign((9.0,), 5, [0, 1], s, p=2.0) == (0, 1)


def test_tie_goes_to_side_zero():
    s = two_node_summary()
    for seed in ([0, 1], [1, 0]):
        assert assign((5.0,), 5, seed, s, p=2.0) == (1, 0)


def test_not_activated_and_empty_window():
    s = two_node_summary()
    assert assign((3.0,), None, [1, 1], s, p=2.0) == (1, 0)
    # both summary points sit on side 1, so the empty side 0 costs nothing
    assert assign((3.0,), 3, [1, 1], s, p=2.0) == (1, 0)
    assert assign((3.0,), 3, [0, 0], s, p=2.0) == (0, 1)
    # activated at 2 the point sees only the entry recorded at time 1
    assert assign((3.0,), 3, [0, 1], s, p=2.0) == (1, 0)
    e = AssignEngine(s, 2.0)
    assert e.contributions((3.0,), 1).size == 0


def test_seed_length_checked():
    with pytest.raises(InputError):
        AssignEngine(two_node_summary(), 2.0).bits([(((1.0,), 0), 5)], np.zeros((1, 3)))


def test_seed_point_missing_from_summary():
    with pytest.raises(InputError):
        AssignEngine(two_node_summary(), 2.0).bits([(((4.0,), 0), 2)], np.zeros((1, 2)))


def test_seed_bits_from_int():
    assert seed_bits_from_int([5, 0], 3).tolist() == [[1, 0, 1], [0, 0, 0]]


def test_inconsistent_activation_rejected():
    with pytest.raises(InputError):
        TimelineMaskSummary([SummaryEntry((0.0,), 0, 1, 0.5, 1), SummaryEntry((0.0,), 0, 2, 0.5, 2)], 1, 1.0, 5)


def naive_assign(x, t, entries, side, keep_rate):
    # direct restatement: for each kept entry before t, d / (effective weight * keep rate)
    c = [0.0, 0.0]
    for e in entries:
        if e.ell >= t:
            continue
        w_eff = min(e.weight, 1 / e.ell) if e.ell == e.t_act else e.weight
        c[side[e.key]] += distance(x, e.point, 2) / (w_eff * keep_rate(e.ell))
    return 1 if c[0] > c[1] else 0


def test_engine_matches_naive_sums(rng):
    params = explicit_params(t0=4, t_e=80, gamma=6.0)
    for i in range(6):
        ds = random_instance(rng, 9, 2)
        cw = compatible_transform(exact_weights(ds)).w
        s, t_acts = build_summary(ds, cw, params, oracle(i, "nv"))
        keys = point_keys(ds)
        seed = rng.integers(0, 2, s.m).astype(np.uint8)
        bits = AssignEngine(s, 2.0).bits(list(zip(keys, t_acts)), seed[None, :])[0]
        side = {}
        order = sorted((t, k, j) for j, (k, t) in enumerate(zip(keys, t_acts)) if t is not None)
        for t, k, j in order:
            side[k] = int(seed[s.seed_pos[k]]) if t <= 4 else naive_assign(k[0], t, s.entries, side, s.params.keep_rate)
            assert bits[j] == side[k]


def test_process_matches_engine(rng):
    for i in range(8):
        ds = random_instance(rng, 8, 2)
        cw = compatible_transform(exact_weights(ds)).w
        params = explicit_params(t0=int(rng.choice([2, 4, 8])), t_e=160, gamma=float(rng.choice([4, 10])))
        o = oracle(i, "pe")
        z_star, _ = brute_force_opt(ds)
        z, m, sigma = greedy_process_oracle(ds, cw, params, z_star, o)
        s, t_acts = build_summary(ds, cw, params, o)
        assert m == s.m
        bits = AssignEngine(s, ds.p).bits(list(zip(point_keys(ds), t_acts)), sigma[None, :])[0]
        for j, t in enumerate(t_acts):
            if t is not None:
                assert z[j].sum() == 1 and bits[j] == z[j, 1]
            else:
                assert z[j].sum() == 0


def test_duplicates_get_separate_timelines():
    ds = Dataset(np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0]]))
    keys = point_keys(ds)
    assert keys[0] != keys[1]
    params = explicit_params(2, 200, 4.0)
    _, t_acts = build_summary(ds, [0.5, 0.5, 0.5], params, RandomOracle("77" * 16))
    assert len(t_acts) == 3


def test_weight_range_checked():
    ds = Dataset(np.array([[0.0], [1.0]]))
    with pytest.raises(InputError):
        build_summary(ds, [0.7, 0.3], explicit_params(2, 10, 2.0), RandomOracle("00" * 16))


def test_parse_weight_mode():
    assert parse_weight_mode("exact") == ("exact",)
    assert parse_weight_mode("sketched:0.5:0.1") == ("sketched", 0.5, 0.1)
    assert parse_weight_mode("dynamic:2") == ("dynamic", 2.0)
    with pytest.raises(InputError):
        parse_weight_mode("sketched:0.5")


def test_pipeline_refuses_degenerate():
    with pytest.raises(InputError, match="zero total"):
        run_reference_pipeline(Dataset(np.zeros((3, 2))), 0.5, oracle=RandomOracle("00" * 16))
    with pytest.raises(InputError):
        run_reference_pipeline(Dataset(np.zeros((1, 2))), 0.5, oracle=RandomOracle("00" * 16))


def test_pipeline_is_deterministic(rng):
    ds = random_instance(rng, 10, 2)
    r1 = run_reference_pipeline(ds, 0.5, oracle=RandomOracle("88" * 16))
    r2 = run_reference_pipeline(ds, 0.5, oracle=RandomOracle("88" * 16))
    assert np.array_equal(r1.cut, r2.cut) and r1.report == r2.report
    pair_sum = sum(distance(a, b, 2) for i, a in enumerate(ds.points) for b in ds.points[i + 1:])
    assert r1.report["f_value"] + r1.report["cut_value"] == pytest.approx(pair_sum)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 8))
def test_pipeline_output_is_complete_cut(seed, n):
    r = np.random.default_rng(seed)
    ds = random_instance(r, n, 2)
    res = run_reference_pipeline(ds, 0.5, oracle=RandomOracle(seed.to_bytes(16, "big")),
                                 params=explicit_params(2, 40, 3.0))
    assert np.all(res.cut.sum(axis=1) == 1)
