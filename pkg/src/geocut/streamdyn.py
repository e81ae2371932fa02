"""Dynamic-stream engine: a single global mask, geometric samples filling
its kept slots, summary construction, pair-based seed selection, queries,
and the correlated sequential process used as an equivalence oracle.

The sampler backend (``ExactSim``) works from the exact survivor set.  Each
draw returns ⊥ with probability 1 - 1/D, the smallest success rate the
sampler contract allows, and otherwise a point x with probability
p(x) = deg(x) / (D * total), reported as p* in [p(x), (1 + eps_pr) p(x)].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, InputError, degree_of, distances_from
from .greedy import DYNAMIC, AssignEngine, SummaryEntry, TimelineMaskSummary, bits_to_cut
from .randoracle import (
    GLOBAL_OWNER,
    TAG_MASK,
    TAG_TIMELINE,
    TAG_WEIGHT,
    RandomOracle,
    TimelineParams,
    owner_of,
)
from .seedselect import SEED_CAP, _estimates, search_seeds

TAG_DRAW = b"Y"
TAG_PSTAR = b"Q"
TAG_BIT = b"b"
TAG_UNDETECTED = b"U"

BOT = -1  # index of a failed draw


@dataclass(frozen=True)
class DynParams:
    epsilon: float
    D: float
    t_e: int
    gamma: float
    t0: int
    t0_formula: int
    eps_pr: float
    s: int

    @property
    def timeline(self) -> TimelineParams:
        return TimelineParams(self.t0, self.t_e, self.gamma)

    @property
    def build_draws(self) -> int:
        """Draws Build-Summ may use; the rest are paired for seed selection."""
        return self.s // 2

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "D": self.D, "t_e": self.t_e, "gamma": self.gamma, "t0": self.t0,
                "t0_formula": self.t0_formula, "eps_pr": self.eps_pr, "s": self.s}


def dyn_params(n: int, eps: float, D: float = 2.0, s: int | None = None, eps_pr: float | None = None) -> DynParams:
    """Smallest t_e, gamma, t0 meeting the dynamic-regime constraints; t0 is clamped to t_e."""
    if not (0 < eps < 1):
        raise InputError(f"epsilon must be in (0, 1), got {eps}")
    if D < 1:
        raise InputError(f"D must be >= 1, got {D}")
    t_e = max(2, math.ceil(n * D / eps))
    gamma = (D * math.log(t_e) + 1.0) ** 2 / eps ** 2
    t0 = math.ceil(max(math.sqrt(gamma) * D / eps, 1.0 / eps))
    if eps_pr is None:
        eps_pr = eps / math.log(t_e)
    if s is None:
        s = math.ceil(8 * (min(t0, t_e) + gamma * math.log(t_e)) / eps)
    return DynParams(eps, float(D), t_e, gamma, min(t0, t_e), t0, float(eps_pr), int(s))


# ---- sampler -----------------------------------------------------------------

class ExactSim:
    """Geometric sampler over an exact point set (canonical lexicographic order)."""

    def __init__(self, points: list[tuple], p: float, D: float, eps_pr: float, oracle: RandomOracle,
                 corrupted: bool = False):
        if len(points) < 2:
            raise InputError("fewer than two distinct points")
        self.points = sorted(points)
        self.arr = np.array(self.points, dtype=np.float64)
        self.p = p
        self.D = float(D)
        self.eps_pr = eps_pr
        self.oracle = oracle
        deg = np.array([degree_of(self.arr[i], self.arr, p) for i in range(len(self.points))])
        self.total = math.fsum(deg.tolist())
        if self.total == 0:
            raise InputError("fewer than two distinct points")
        share = deg / self.total
        if corrupted:
            # an undetected sketch failure: uniform draws, probabilities still reported as if correct
            self.cdf = np.arange(1, len(self.points) + 1) / len(self.points)
        else:
            self.cdf = np.cumsum(share)
        self.prob = share / self.D
        self.index = {x: i for i, x in enumerate(self.points)}

    def draws(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Draws start .. start+count-1 (1-based): (point index or BOT, p*)."""
        if count <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        u = self.oracle.uniforms(GLOBAL_OWNER + TAG_DRAW, start - 1, count)
        q = self.oracle.uniforms(GLOBAL_OWNER + TAG_PSTAR, start - 1, count)
        ok = u < 1.0 / self.D
        idx = np.minimum(np.searchsorted(self.cdf, u * self.D, side="right"), len(self.points) - 1)
        idx = np.where(ok, idx, BOT)
        pstar = np.where(ok, self.prob[np.maximum(idx, 0)] * (1.0 + self.eps_pr * q), 0.0)
        return idx.astype(np.int64), pstar

    def draw(self, c: int) -> tuple[tuple | None, float]:
        idx, ps = self.draws(c, 1)
        if idx[0] == BOT:
            return None, 0.0
        return self.points[int(idx[0])], float(ps[0])


# ---- state -------------------------------------------------------------------

@dataclass
class DynState:
    delta: int
    d: int
    eps: float
    oracle: RandomOracle
    p: float = 2.0
    D: float = 2.0
    n_hint: int | None = None
    s: int | None = None
    seed_cap: int = SEED_CAP
    window: str = "before"
    simulate_undetected: bool = False
    counts: Counter = field(default_factory=Counter)
    updates: int = 0
    params: DynParams | None = None
    summary: TimelineMaskSummary | None = None
    sigma: np.ndarray | None = None
    failed: bool = False
    failure: str | None = None
    info: dict = field(default_factory=dict)
    _sampler: ExactSim | None = None
    _weights: dict | None = None
    _engine: AssignEngine | None = None
    _mask: np.ndarray | None = None

    def survivors(self) -> list[tuple]:
        bad = [x for x, c in self.counts.items() if c > 1]
        if bad:
            raise InputError(f"final multiset is not a set: {bad[0]} present {self.counts[bad[0]]} times")
        return sorted(x for x, c in self.counts.items() if c == 1)


def dyn_init(delta: int, d: int, eps: float, oracle: RandomOracle | None = None, **kwargs) -> DynState:
    if delta < 1 or d < 1:
        raise InputError("need delta >= 1 and d >= 1")
    return DynState(delta, d, eps, oracle or RandomOracle(), **kwargs)


def dyn_update(state: DynState, op: str, x) -> DynState:
    """Apply ``+`` / ``insert`` or ``-`` / ``delete`` of a grid point."""
    if state.params is not None:
        raise InputError("stream already closed")
    x = tuple(float(c) for c in x)
    if len(x) != state.d:
        raise InputError(f"point {x} has dimension {len(x)}, expected {state.d}")
    if any(c != round(c) or c < 1 or c > state.delta for c in x):
        raise InputError(f"coordinates of {x} must be integers in [1, {state.delta}]")
    if op in ("+", "insert"):
        state.counts[x] += 1
    elif op in ("-", "delete"):
        if state.counts[x] <= 0:
            raise InputError(f"delete of absent point {x}")
        state.counts[x] -= 1
        if state.counts[x] == 0:
            del state.counts[x]
    else:
        raise InputError(f"unknown update {op!r}")
    state.updates += 1
    return state


def sampler_of(state: DynState) -> ExactSim:
    if state._sampler is None:
        pts = state.survivors()
        if len(pts) < 2:
            raise InputError("fewer than two distinct points")
        corrupted = False
        if state.simulate_undetected:
            corrupted = state.oracle.uniform(GLOBAL_OWNER + TAG_UNDETECTED) < state.eps
            state.info["undetected_failure"] = bool(corrupted)
        prm = _params_of(state, len(pts))
        state._sampler = ExactSim(pts, state.p, state.D, prm.eps_pr, state.oracle, corrupted)
    return state._sampler


def _params_of(state: DynState, n: int) -> DynParams:
    if state.params is None:
        state.params = dyn_params(state.n_hint or n, state.eps, state.D, s=state.s)
    return state.params


def dyn_weights(state: DynState) -> dict:
    """w(x) / (2D) per survivor, with w(x) in [true weight, D * true weight]."""
    if state._weights is None:
        smp = sampler_of(state)
        out = {}
        for i, x in enumerate(smp.points):
            true = smp.prob[i] * smp.D
            mult = 1.0 if state.D == 1 else 1.0 + (state.D - 1.0) * state.oracle.uniform(owner_of(x) + TAG_WEIGHT)
            out[x] = true * mult / (2.0 * state.D)
        state._weights = out
    return state._weights


def _mask(state: DynState) -> np.ndarray:
    if state._mask is None:
        tp = state.params.timeline
        u = state.oracle.series(GLOBAL_OWNER + TAG_MASK, tp.t_e)
        state._mask = u <= tp.keep_rate(np.arange(1, tp.t_e + 1))
    return state._mask


def _free_activation(state: DynState, x: tuple, t: int) -> int | None:
    """Smallest ell <= t with K_ell = 0 and U_{x,ell} <= min(w, 1/ell)."""
    if t < 1:
        return None
    w = dyn_weights(state)[x]
    u = state.oracle.series(owner_of(x) + TAG_TIMELINE, state.params.t_e)[:t]
    ell = np.arange(1, t + 1, dtype=np.float64)
    hits = np.flatnonzero(~_mask(state)[:t] & (u <= np.minimum(w, 1.0 / ell)))
    return int(hits[0]) + 1 if hits.size else None


def dyn_activation_time(state: DynState, x, t: int, P: dict | None = None) -> int | None:
    """Activation time if at most t, else None ("activated after t")."""
    x = tuple(float(c) for c in x)
    if x not in dyn_weights(state):
        raise InputError(f"point {x} is not in the final set")
    if P is None:
        P = state.summary.nodes if state.summary is not None else {}
    got = P.get((x, 0))
    if got is not None:
        return got
    return _free_activation(state, x, t)


def build_summ(state: DynState):
    """Walk the global mask, consuming one draw per kept slot.

    Returns (entries, kept slots) or raises nothing and marks ``failed`` when
    the kept slots need more than s/2 draws.
    """
    smp = sampler_of(state)
    prm = state.params
    mask = _mask(state)
    slots = np.flatnonzero(mask) + 1
    state.info["kept_slots"] = int(slots.size)
    if slots.size > prm.build_draws:
        state.failed = True
        state.failure = f"build: {slots.size} kept slots need more than {prm.build_draws} draws"
        return None
    idx, pstar = smp.draws(1, int(slots.size))
    bits = state.oracle.uniforms(GLOBAL_OWNER + TAG_BIT, 0, prm.t_e + 1)
    nodes: dict = {}
    entries = []
    for c, t in enumerate(slots.tolist()):
        if idx[c] == BOT:
            continue
        y = smp.points[int(idx[c])]
        ps = float(pstar[c])
        prev = nodes.get((y, 0))
        if prev is None:
            prev = _free_activation(state, y, t - 1)
        if prev is not None:
            entries.append(SummaryEntry(y, 0, t, ps, prev))
            nodes[(y, 0)] = prev
        elif bits[t] < min(1.0 / (t * ps), 1.0):
            entries.append(SummaryEntry(y, 0, t, ps, t))
            nodes[(y, 0)] = t
    return entries, slots


def _pair_matrix(state: DynState):
    """Distinct sampled points and the summed pair contributions d / (p1 p2)."""
    smp = state._sampler
    prm = state.params
    first = prm.build_draws + 1
    count = prm.s - prm.build_draws
    count -= count % 2
    idx, pstar = smp.draws(first, count)
    a_i, b_i = idx[0::2], idx[1::2]
    a_p, b_p = pstar[0::2], pstar[1::2]
    good = (a_i != BOT) & (b_i != BOT)
    H = int(good.sum())
    state.info["pairs"] = count // 2
    state.info["successful_pairs"] = H
    if H == 0:
        return None, None, 0
    a_i, b_i, a_p, b_p = a_i[good], b_i[good], a_p[good], b_p[good]
    used = sorted(set(a_i.tolist()) | set(b_i.tolist()))
    pos = {k: j for j, k in enumerate(used)}
    q = len(used)
    dist = np.stack([distances_from(smp.arr[k], smp.arr[used], state.p) for k in used])
    M = np.zeros((q, q))
    ra = np.array([pos[k] for k in a_i.tolist()])
    rb = np.array([pos[k] for k in b_i.tolist()])
    np.add.at(M, (ra, rb), dist[ra, rb] / (a_p * b_p))
    # the scorer computes sum(same * M) / 2, so symmetrizing with (M + M^T) / (2H)
    # yields sum_h d / (p1 p2) * same / (2H)
    M = (M + M.T) / (2 * H)
    return [smp.points[k] for k in used], M, H


def dyn_preprocess(state: DynState) -> DynState:
    if state.summary is not None or state.failed:
        return state
    pts = state.survivors()
    if len(pts) < 2:
        raise InputError("fewer than two distinct points")
    _params_of(state, len(pts))
    built = build_summ(state)
    tp = state.params.timeline
    if built is None:
        state.summary = TimelineMaskSummary([], tp.t0, tp.gamma, tp.t_e, mode=DYNAMIC)
        state.sigma = np.zeros(0, dtype=np.uint8)
        return state
    entries, _ = built
    state.summary = TimelineMaskSummary(entries, tp.t0, tp.gamma, tp.t_e, mode=DYNAMIC)
    state._engine = AssignEngine(state.summary, state.p, window=state.window)
    used, M, H = _pair_matrix(state)
    m = state.summary.m
    if H == 0:
        state.failed = True
        state.failure = "no successful sample pairs"
        state.sigma = np.zeros(m, dtype=np.uint8)
        return state
    queries = [((x, 0), dyn_activation_time(state, x, tp.t_e)) for x in used]
    engine = state._engine

    def score(rows):
        return _estimates(M, engine.bits(queries, rows))

    state.sigma, info = search_seeds(score, m, state.oracle, state.seed_cap)
    state.info.update(info)
    return state


def dyn_assign_query(state: DynState, x) -> tuple[int, int]:
    if state.summary is None:
        raise InputError("call dyn_preprocess first")
    if state.failed:
        return (1, 0)
    x = tuple(float(c) for c in x)
    t = dyn_activation_time(state, x, state.params.t_e)
    if t is None:
        return (1, 0)
    bit = int(state._engine.bits([((x, 0), t)], state.sigma[None, :])[0, 0])
    return (1 - bit, bit)


def dyn_query_all(state: DynState, points=None) -> np.ndarray:
    """Rows for the given points (default: survivors in lexicographic order)."""
    if state.summary is None:
        raise InputError("call dyn_preprocess first")
    keys = state.survivors() if points is None else [tuple(float(c) for c in x) for x in points]
    if state.failed:
        return bits_to_cut(np.zeros(len(keys), dtype=np.int8))
    queries = [((x, 0), dyn_activation_time(state, x, state.params.t_e)) for x in keys]
    bits = state._engine.bits(queries, state.sigma[None, :])[0]
    return bits_to_cut(bits)


def dyn_space_report(state: DynState) -> dict:
    return {
        "survivors": sum(1 for c in state.counts.values() if c == 1), "updates": state.updates,
        "P": len(state.summary) if state.summary is not None else 0,
        "m": state.summary.m if state.summary is not None else 0,
        "s": state.params.s if state.params else None,
    }


def run_dynamic_stream(ops, delta: int, d: int, eps: float, oracle: RandomOracle | None = None, **kwargs) -> DynState:
    st = dyn_init(delta, d, eps, oracle, **kwargs)
    for op, x in ops:
        dyn_update(st, op, x)
    return dyn_preprocess(st)


# ---- sequential oracle -----------------------------------------------------------

def correlated_greedy_oracle(state: DynState, z_star):
    """Round-by-round correlated process over the survivors (lexicographic order).

    Uses the state's mask, draws, and free-slot timelines.  Returns
    (partial cut, m, sigma*) with sigma* the z* bits of the points activated
    by t0.  Greedy ties resolve to side 0 as in Assign, and the common
    1/(t-1) factor is dropped.
    """
    smp = sampler_of(state)
    prm = _params_of(state, len(smp.points))
    tp = prm.timeline
    pts = smp.points
    n = len(pts)
    z_star = np.asarray(z_star, dtype=np.int8)
    w = dyn_weights(state)
    wv = np.array([w[x] for x in pts])
    U = np.stack([state.oracle.series(owner_of(x) + TAG_TIMELINE, tp.t_e) for x in pts])
    mask = _mask(state)
    slots = int(mask.sum())
    idx, pstar = smp.draws(1, slots)
    bits = state.oracle.uniforms(GLOBAL_OWNER + TAG_BIT, 0, tp.t_e + 1)
    z = np.zeros((n, 2), dtype=np.int8)
    t_act = [None] * n
    entries: list[tuple[int, float]] = []  # (j, denominator) in time order
    c = 0
    for t in range(1, tp.t_e + 1):
        newly: list[int] = []
        fresh: list[tuple[int, float]] = []
        if mask[t - 1]:
            i = int(idx[c])
            ps = float(pstar[c])
            c += 1
            if i != BOT:
                keep = tp.keep_rate(t)
                if t_act[i] is not None:
                    fresh.append((i, ps * keep))
                elif bits[t] < min(1.0 / (t * ps), 1.0):
                    newly.append(i)
                    fresh.append((i, min(ps, 1.0 / t) * keep))
        else:
            for i in range(n):
                if t_act[i] is None and U[i, t - 1] <= min(wv[i], 1.0 / t):
                    newly.append(i)
        for i in newly:
            if t <= tp.t0:
                z[i] = z_star[i]
            else:
                c0 = c1 = 0.0
                if entries:
                    dist = distances_from(smp.arr[i], smp.arr[[j for j, _ in entries]], state.p)
                    for (j, den), dj in zip(entries, dist.tolist()):
                        if z[j, 1]:
                            c1 += dj / den
                        else:
                            c0 += dj / den
                z[i] = (0, 1) if c0 > c1 else (1, 0)
            t_act[i] = t
        entries.extend(fresh)
    seeds = [i for i in range(n) if t_act[i] is not None and t_act[i] <= tp.t0]
    sigma = np.array([int(z_star[i, 1]) for i in seeds], dtype=np.uint8)
    return z, len(seeds), sigma


def survivors_dataset(state: DynState) -> Dataset:
    return Dataset(np.array(state.survivors(), dtype=np.float64), p=state.p, delta=state.delta)
