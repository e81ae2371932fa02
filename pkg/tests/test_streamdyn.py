import math

import numpy as np
import pytest

from geocut.core import InputError, distance
from geocut.randoracle import RandomOracle
from geocut.streamdyn import (
    BOT,
    ExactSim,
    build_summ,
    correlated_greedy_oracle,
    dyn_init,
    dyn_params,
    dyn_preprocess,
    dyn_query_all,
    dyn_space_report,
    dyn_update,
    dyn_weights,
    run_dynamic_stream,
    survivors_dataset,
)

from conftest import oracle, random_instance

TRIPLE = [(1.0, 1.0), (2.0, 1.0), (4.0, 3.0)]


def test_dyn_params_frozen():
    prm = dyn_params(50, 0.5, 2)
    assert (prm.t_e, prm.t0, prm.s) == (200, 93, 47090)
    assert prm.gamma == pytest.approx(537.9277485314009, rel=1e-14)
    assert prm.eps_pr == pytest.approx(0.09436958290887743, rel=1e-14)
    assert prm.build_draws == 23545


def test_dyn_params_validation():
    with pytest.raises(InputError):
        dyn_params(10, 0.0)
    with pytest.raises(InputError):
        dyn_params(10, 0.5, D=0.5)


def test_sampler_probabilities():
    smp = ExactSim(TRIPLE, 2.0, 2.0, 0.1, RandomOracle("01" * 16))
    deg = [sum(distance(a, b, 2) for b in TRIPLE) for a in TRIPLE]
    assert np.allclose(smp.prob, np.array(deg) / (2.0 * sum(deg)))
    idx, ps = smp.draws(1, 40000)
    ok = idx != BOT
    assert abs(ok.mean() - 0.5) < 3 * math.sqrt(0.25 / 40000)
    for i in range(3):
        hit = (idx == i).mean()
        assert abs(hit - smp.prob[i]) < 3 * math.sqrt(smp.prob[i] * (1 - smp.prob[i]) / 40000)
        sel = ps[idx == i]
        assert np.all(sel >= smp.prob[i]) and np.all(sel <= 1.1 * smp.prob[i])
    x, p = smp.draw(1)
    assert (x is None) == (idx[0] == BOT)


def test_sampler_rejects_degenerate():
    with pytest.raises(InputError):
        ExactSim([(1.0, 1.0)], 2.0, 2.0, 0.1, RandomOracle("01" * 16))


def test_weights_within_band(rng):
    pts = [tuple(r) for r in random_instance(rng, 8, 2, grid=9).points.tolist()]
    st = dyn_init(9, 2, 0.5, oracle(0), D=2.0)
    for x in pts:
        dyn_update(st, "+", x)
    w = dyn_weights(st)
    deg = {a: sum(distance(a, b, 2) for b in pts) for a in pts}
    tot = sum(deg.values())
    for x in pts:
        assert deg[x] / tot / 4 <= w[x] <= deg[x] / tot / 2 + 1e-15


def slot_activation_probability(p_i, t_e, eps_pr, grid=4000):
    # a_t = a_{t-1} + (1 - a_{t-1}) p_i E_U[min(1 / (t p_i (1 + eps_pr U)), 1)], U uniform by midpoint rule
    u = (np.arange(grid) + 0.5) / grid
    a = 0.0
    for t in range(1, t_e + 1):
        a += (1 - a) * p_i * float(np.mean(np.minimum(1 / (t * p_i * (1 + eps_pr * u)), 1.0)))
    return a


def test_slot_activation_marginals():
    # D=1.2, n=3, eps=0.5: t_e = 8 and every slot is kept, so activation comes only from draws
    prm = dyn_params(3, 0.5, 1.2)
    assert prm.t_e == 8 and prm.gamma >= 8 and prm.t0 == 8
    trials = 2500
    hits = np.zeros(3)
    for k in range(trials):
        st = dyn_init(5, 2, 0.5, oracle(k, "sm"), D=1.2)
        for x in TRIPLE:
            dyn_update(st, "+", x)
        entries, slots = build_summ(st)
        assert slots.size == 8
        nodes = {e.point for e in entries}
        for i, x in enumerate(sorted(TRIPLE)):
            hits[i] += x in nodes
    smp = st._sampler
    for i in range(3):
        a = slot_activation_probability(smp.prob[i], 8, prm.eps_pr)
        assert abs(hits[i] / trials - a) < 3 * math.sqrt(a * (1 - a) / trials), (i, hits[i] / trials, a)


def test_build_fails_when_slots_exceed_budget():
    st = run_dynamic_stream([("+", x) for x in TRIPLE], 5, 2, 0.5, oracle(1), s=4)
    assert st.failed and "kept slots" in st.failure
    assert dyn_query_all(st).tolist() == [[1, 0]] * 3


def test_process_equals_query_sweep(rng):
    for i in range(3):
        pts = [tuple(r) for r in random_instance(rng, 7, 2, grid=6).points.tolist()]
        st = run_dynamic_stream([("+", x) for x in pts], 6, 2, 0.5, oracle(i, "pq"))
        assert not st.failed
        z_star = np.zeros((7, 2), dtype=np.int8)
        z_star[:, 0] = 1
        z_star[::2] = (0, 1)
        z, m, sigma = correlated_greedy_oracle(st, z_star)
        assert m == st.summary.m
        st.sigma = sigma
        got = dyn_query_all(st)
        active = z.sum(axis=1) == 1
        assert np.array_equal(got[active], z[active])
        assert np.all(got[~active] == (1, 0))


def test_churn_matches_fresh_ingest():
    ops = [("+", (1.0, 1.0)), ("+", (5.0, 5.0)), ("-", (1.0, 1.0)), ("+", (2.0, 3.0)),
           ("+", (1.0, 1.0)), ("+", (4.0, 1.0))]
    final = [(5.0, 5.0), (2.0, 3.0), (1.0, 1.0), (4.0, 1.0)]
    a = run_dynamic_stream(ops, 5, 2, 0.5, oracle(3, "ch"))
    b = run_dynamic_stream([("+", x) for x in final], 5, 2, 0.5, oracle(3, "ch"))
    assert a.survivors() == b.survivors()
    assert [(e.point, e.ell) for e in a.summary.entries] == [(e.point, e.ell) for e in b.summary.entries]
    assert np.array_equal(dyn_query_all(a), dyn_query_all(b))


def test_update_checks():
    st = dyn_init(4, 2, 0.5, oracle(0))
    with pytest.raises(InputError):
        dyn_update(st, "-", (1.0, 1.0))
    with pytest.raises(InputError):
        dyn_update(st, "*", (1.0, 1.0))
    with pytest.raises(InputError):
        dyn_update(st, "+", (5.0, 1.0))
    dyn_update(st, "insert", (1.0, 1.0))
    dyn_update(st, "insert", (1.0, 1.0))
    with pytest.raises(InputError, match="not a set"):
        st.survivors()
    dyn_update(st, "delete", (1.0, 1.0))
    with pytest.raises(InputError):
        dyn_preprocess(st)


def test_undetected_failure_flag_rate():
    flagged = 0
    for k in range(400):
        st = run_dynamic_stream([("+", x) for x in TRIPLE], 5, 2, 0.5, oracle(k, "uf"), simulate_undetected=True)
        flagged += st.info["undetected_failure"]
    assert abs(flagged / 400 - 0.5) < 3 * math.sqrt(0.25 / 400)


def test_space_report_and_dataset():
    st = run_dynamic_stream([("+", x) for x in TRIPLE], 5, 2, 0.5, oracle(0))
    rep = dyn_space_report(st)
    assert rep["survivors"] == 3 and rep["updates"] == 3 and rep["P"] == len(st.summary)
    assert survivors_dataset(st).points.tolist() == [list(x) for x in sorted(TRIPLE)]
