"""Insertion-only streaming engine.

Every inserted point gets a prefix weight, a chance to enter the check set C
and a timeline-mask structure that survives only while its timeline is
activated and kept somewhere.  After each insertion a clean-up pass lowers
the stored weights of older points to their running minimum, thinning C and
discarding structures that can no longer matter.  After the stream,
``ins_preprocess`` lowers every surviving structure to w_n / 30, assembles
the summary and picks the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, InputError, distances_from
from .greedy import (
    AssignEngine,
    GreedyParams,
    SummaryEntry,
    TimelineMaskSummary,
    compute_params,
    point_timeline,
)
from .randoracle import TAG_CHECK, TAG_WEIGHT, RandomOracle, first_activation, owner_of, timeline_uniforms
from .seedselect import SEED_CAP, select_seed, xi_value
from .weights import sketch_words

LAMBDA_FINAL = 60.0
FINAL_DIVISOR = 30.0


class InsWeightState:
    """Prefix weights min((1 + eta/3) * deg / (2W), 1), with 0/0 read as 1.

    ``deg`` is the distance from the point to everything inserted so far and
    W the running sum of those distances at insertion time.  The sketched
    backend scales each distance sum by a keyed factor in [1, 1 + eta/3].
    """

    def __init__(self, p: float, eta: float = 1.0, backend: str = "exact",
                 oracle: RandomOracle | None = None, declared_words: int = 0):
        if backend not in ("exact", "sketched"):
            raise InputError(f"unknown weight backend {backend!r}")
        if backend == "sketched" and oracle is None:
            raise InputError("sketched weights need an oracle")
        self.p = p
        self.eta = eta
        self.backend = backend
        self.oracle = oracle
        self.points: list[tuple] = []
        self.count = 0
        self.W = 0.0
        self.declared_words = declared_words

    def _dist_sum(self, x: tuple) -> float:
        if not self.points:
            return 0.0
        raw = math.fsum(distances_from(np.asarray(x), np.asarray(self.points), self.p).tolist())
        if self.backend == "sketched":
            raw *= 1.0 + (self.eta / 3.0) * self.oracle.uniform(owner_of(x) + TAG_WEIGHT, self.count)
        return raw

    def add(self, x: tuple) -> None:
        self.count += 1
        self.points.append(x)
        self.W += self._dist_sum(x)

    def weight(self, x: tuple) -> float:
        if self.W == 0:
            return 1.0
        return min((1.0 + self.eta / 3.0) * self._dist_sum(x) / (2.0 * self.W), 1.0)

    @property
    def words(self) -> int:
        if self.backend == "exact":
            return self.count * (len(self.points[0]) if self.points else 0) + 2
        return self.declared_words + 2


@dataclass
class TimelineMaskDS:
    point: tuple
    w: float = 0.5
    t_act: int | None = None
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def mod_min_weight(self, w_new: float, oracle: RandomOracle, params) -> bool:
        """Lower the weight; True while the timeline is still activated and kept."""
        self.w = min(self.w, w_new)
        self.t_act, self.kept = point_timeline(oracle, (self.point, 0), self.w, params)
        return self.kept.size > 0


@dataclass
class InsState:
    delta: int
    d: int
    eps: float
    params: GreedyParams
    xi: float
    oracle: RandomOracle
    p: float = 2.0
    eta: float = 1.0
    seed_cap: int = SEED_CAP
    weights: InsWeightState = None
    C: dict = field(default_factory=dict)  # point -> current omega / 2
    T: dict = field(default_factory=dict)  # point -> TimelineMaskDS
    inserted: set = field(default_factory=set)
    step: int = 0
    ledger: list = field(default_factory=list)  # (step, phase, words)
    # analysis-only record of the running minimum weight, never charged to the ledger
    omega: dict = field(default_factory=dict)
    summary: TimelineMaskSummary | None = None
    sigma: np.ndarray | None = None
    seed_info: dict = field(default_factory=dict)
    final_weights: dict = field(default_factory=dict)

    @property
    def timeline(self):
        return self.params.timeline

    def words(self) -> int:
        per = self.d + 1
        return self.weights.words + per * (len(self.C) + len(self.T))


def ins_params(delta: int, d: int, eps: float, n_hint: int | None = None, lam: float = LAMBDA_FINAL) -> GreedyParams:
    """Greedy parameters with t_e = min(delta^d, n_hint) * lam / eps."""
    cells = delta ** d
    base = cells if n_hint is None else min(cells, n_hint)
    return compute_params(max(base, 2), eps, lam)


def ins_init(delta: int, d: int, eps: float, oracle: RandomOracle | None = None, *, p: float = 2.0,
             n_hint: int | None = None, xi: float | None = None, eta: float = 1.0, weight_backend: str = "exact",
             seed_cap: int = SEED_CAP, params: GreedyParams | None = None) -> InsState:
    oracle = oracle or RandomOracle()
    if delta < 1 or d < 1:
        raise InputError("need delta >= 1 and d >= 1")
    params = params or ins_params(delta, d, eps, n_hint)
    if xi is None:
        # the seed family has at most t0 bits and log n is replaced by log(delta^d)
        xi = xi_value(params.t0, float(delta) ** d, eps, params.lam, eps, cap=seed_cap)
    ws = InsWeightState(p, eta, weight_backend, oracle, sketch_words(delta ** d, d, eta / 3.0, eps))
    return InsState(delta, d, eps, params, float(xi), oracle, p, eta, seed_cap, ws)


def _check_point(state: InsState, x) -> tuple:
    x = tuple(float(c) for c in x)
    if len(x) != state.d:
        raise InputError(f"point {x} has dimension {len(x)}, expected {state.d}")
    if any(c != round(c) or c < 1 or c > state.delta for c in x):
        raise InputError(f"coordinates of {x} must be integers in [1, {state.delta}]")
    return x


def _check_uniform(state: InsState, x: tuple, index: int) -> float:
    return state.oracle.uniform(owner_of(x) + TAG_CHECK, index)


def ins_add_point(state: InsState, x) -> InsState:
    if state.summary is not None:
        raise InputError("stream already preprocessed")
    x = _check_point(state, x)
    if x in state.inserted:
        raise InputError(f"duplicate insert of {x}")
    state.step += 1
    state.inserted.add(x)
    state.weights.add(x)
    w_half = state.weights.weight(x) / 2.0
    state.omega[x] = 2.0 * w_half
    if _check_uniform(state, x, 0) < min(state.xi * w_half, 1.0):
        state.C[x] = w_half
    ds = TimelineMaskDS(x)
    if ds.mod_min_weight(w_half, state.oracle, state.timeline):
        state.T[x] = ds
    state.ledger.append((state.step, "insert", state.words()))

    # clean-up: C first, then T, each in lexicographic order
    for y in sorted(k for k in state.C if k != x):
        sigma = state.C[y]
        lowered = min(sigma, state.weights.weight(y) / 2.0)
        keep = min(state.xi * lowered, 1.0) / min(state.xi * sigma, 1.0)
        if _check_uniform(state, y, state.step) < keep:
            state.C[y] = lowered
        else:
            del state.C[y]
    for y in sorted(k for k in state.T if k != x):
        if not state.T[y].mod_min_weight(state.weights.weight(y) / 2.0, state.oracle, state.timeline):
            del state.T[y]
    for y in state.omega:
        if y != x:
            state.omega[y] = min(state.omega[y], state.weights.weight(y))
    state.ledger.append((state.step, "cleanup", state.words()))
    return state


def _final_weight(state: InsState, x: tuple) -> float:
    return state.weights.weight(x) / FINAL_DIVISOR


def _regenerate_activation(state: InsState, x: tuple) -> int | None:
    u = timeline_uniforms(state.oracle, owner_of(x), state.params.t_e)
    return first_activation(u, _final_weight(state, x))


def ins_preprocess(state: InsState) -> InsState:
    if state.summary is not None:
        return state
    if len(state.inserted) < 2:
        raise InputError("fewer than two distinct points")
    tp = state.timeline
    entries = []
    for y in sorted(state.T):
        ds = state.T[y]
        w_fin = _final_weight(state, y)
        state.final_weights[y] = w_fin
        if not ds.mod_min_weight(w_fin, state.oracle, tp):
            del state.T[y]
            continue
        for ell in ds.kept.tolist():
            entries.append(SummaryEntry(y, 0, int(ell), ds.w, ds.t_act))
    state.summary = TimelineMaskSummary(entries, tp.t0, tp.gamma, tp.t_e)
    engine = AssignEngine(state.summary, state.p)
    check, probs = [], []
    for y in sorted(state.C):
        ds = state.T.get(y)
        t_y = ds.t_act if ds is not None else _regenerate_activation(state, y)
        check.append(((y, 0), t_y))
        probs.append(min(state.xi * state.C[y], 1.0))
    state.sigma, state.seed_info = select_seed(
        engine, check, np.array(probs), state.summary.m, state.p, oracle=state.oracle, cap=state.seed_cap,
    )
    state.ledger.append((state.step, "preprocess", state.words() + state.summary.words(state.d)))
    return state


def ins_activation_time(state: InsState, x) -> int | None:
    x = tuple(float(c) for c in x)
    if x not in state.inserted:
        raise InputError(f"point {x} was never inserted")
    ds = state.T.get(x)
    if ds is not None:
        return ds.t_act
    t = _regenerate_activation(state, x)
    # a point activated by t0 is kept at its activation time, so it cannot be forgotten
    assert t is None or t > state.params.t0, f"forgotten point {x} activated at {t} <= t0"
    return t


def ins_assign_query(state: InsState, x) -> tuple[int, int]:
    if state.summary is None:
        raise InputError("call ins_preprocess first")
    t = ins_activation_time(state, x)
    if t is None:
        return (1, 0)
    x = tuple(float(c) for c in x)
    bit = int(AssignEngine(state.summary, state.p).bits([((x, 0), t)], state.sigma[None, :])[0, 0])
    return (1 - bit, bit)


def ins_query_all(state: InsState, points) -> np.ndarray:
    """Sides for many points with one engine pass; rows as in ``ins_assign_query``."""
    if state.summary is None:
        raise InputError("call ins_preprocess first")
    keys = [tuple(float(c) for c in x) for x in points]
    queries = [((x, 0), ins_activation_time(state, x)) for x in keys]
    bits = AssignEngine(state.summary, state.p).bits(queries, state.sigma[None, :])[0]
    return np.stack([1 - bits, bits], axis=1).astype(np.int8)


def ins_space_report(state: InsState) -> dict:
    P = len(state.summary) if state.summary is not None else 0
    m = state.summary.m if state.summary is not None else 0
    return {
        "C": len(state.C), "T": len(state.T), "P": P, "m": m,
        "words": state.words() + (state.summary.words(state.d) if state.summary is not None else 0),
        "weight_words": state.weights.words, "steps": state.step,
    }


def run_insertion_stream(points, delta: int, eps: float, oracle: RandomOracle | None = None, p: float = 2.0,
                         **kwargs) -> InsState:
    pts = [tuple(float(c) for c in x) for x in points]
    if not pts:
        raise InputError("fewer than two distinct points")
    st = ins_init(delta, len(pts[0]), eps, oracle, p=p, **kwargs)
    for x in pts:
        ins_add_point(st, x)
    return ins_preprocess(st)


def final_weight_vector(state: InsState, points) -> np.ndarray:
    """w_n(x) / 30 for each point, the weights the summary is built on."""
    return np.array([_final_weight(state, tuple(float(c) for c in x)) for x in points])


def dataset_of(state: InsState, points) -> Dataset:
    return Dataset(np.asarray(points, dtype=np.float64), p=state.p, delta=state.delta)
