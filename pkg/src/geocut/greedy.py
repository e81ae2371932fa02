"""Parameters, timeline-mask summaries, the Assign rule and the sequential
greedy process used as an equivalence oracle.

Assign decisions compare two sums of ``d(x_i, x_j) / (w * keep_rate)`` over
summary entries.  Both the assignment engine and the process oracle add
those terms one by one in canonical entry order (time, then lexicographic
point, then duplicate index), so they agree bit for bit, exact ties included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Dataset,
    InputError,
    cut_value,
    distances_from,
    duplicate_indices,
    objective_f,
)
from .randoracle import (
    RandomOracle,
    TimelineParams,
    first_activation,
    mask_bits,
    mask_uniforms,
    owner_of,
    timeline_bits,
    timeline_uniforms,
)

STATIC = "static"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class GreedyParams:
    epsilon: float
    lam: float
    t_e: int
    t0: int
    gamma: float
    t0_formula: int = 0  # t0 before clamping to t_e
    xi: float | None = None

    @property
    def timeline(self) -> TimelineParams:
        return TimelineParams(self.t0, self.t_e, self.gamma)

    @property
    def clamped(self) -> bool:
        return self.t0_formula > self.t0

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "lambda": self.lam, "t_e": self.t_e, "t0": self.t0,
            "t0_formula": self.t0_formula, "gamma": self.gamma, "xi": self.xi,
        }


def compute_params(n: int, eps: float, lam: float) -> GreedyParams:
    if not (0 < eps < 1):
        raise InputError(f"epsilon must be in (0, 1), got {eps}")
    if lam < 1 or n < 2:
        raise InputError("need lambda >= 1 and n >= 2")
    t_e = math.ceil(n * lam / eps)
    gamma = (math.log(t_e) + 1.0) ** 2 * lam / eps ** 2
    t0 = math.ceil(max(math.sqrt(gamma * lam) / eps, 1.0 / eps))
    return GreedyParams(eps, float(lam), t_e, min(t0, t_e), gamma, t0_formula=t0)


def explicit_params(t0: int, t_e: int, gamma: float, eps: float = 0.5, lam: float = 8.0) -> GreedyParams:
    """Hand-picked small parameters, used to exercise the greedy branch at desk scale."""
    TimelineParams(t0, t_e, gamma)
    return GreedyParams(eps, float(lam), t_e, t0, float(gamma), t0_formula=t0)


# ---- summary -----------------------------------------------------------------

Key = tuple  # (coords tuple, dup index)


@dataclass
class SummaryEntry:
    point: tuple
    dup: int
    ell: int
    weight: float  # w_j (static) or p*_ell (dynamic)
    t_act: int

    @property
    def key(self) -> Key:
        return (self.point, self.dup)


@dataclass
class TimelineMaskSummary:
    entries: list[SummaryEntry]
    t0: int
    gamma: float
    t_e: int
    mode: str = STATIC

    def __post_init__(self):
        self.entries.sort(key=lambda e: (e.ell, e.point, e.dup))
        self.nodes: dict[Key, int] = {}
        for e in self.entries:
            prev = self.nodes.setdefault(e.key, e.t_act)
            if prev != e.t_act:
                raise InputError(f"inconsistent activation times for {e.point}")
        self.seed_order: list[Key] = sorted(k for k, t in self.nodes.items() if t <= self.t0)
        self.seed_pos = {k: i for i, k in enumerate(self.seed_order)}

    @property
    def m(self) -> int:
        return len(self.seed_order)

    def __len__(self):
        return len(self.entries)

    @property
    def params(self) -> TimelineParams:
        return TimelineParams(self.t0, self.t_e, self.gamma)

    def words(self, d: int) -> int:
        return len(self.entries) * (d + 3)


def point_keys(ds: Dataset) -> list[Key]:
    dups = duplicate_indices(ds.points)
    return [(tuple(ds.points[i].tolist()), dups[i]) for i in range(ds.n)]


def point_timeline(oracle: RandomOracle, key: Key, w: float, params: TimelineParams):
    """(activation time, kept times) for one point under weight w."""
    owner = owner_of(key[0], key[1])
    a = timeline_bits(timeline_uniforms(oracle, owner, params.t_e), w)
    if not a.any():
        return None, np.zeros(0, dtype=np.int64)
    k = mask_bits(mask_uniforms(oracle, owner, params.t_e), params)
    return int(np.argmax(a)) + 1, np.flatnonzero(a & k) + 1


def summarize_points(keys: Sequence[Key], w: Sequence[float], params: TimelineParams, oracle: RandomOracle):
    """Summary entries and activation times for a batch of points."""
    entries = []
    t_acts = []
    for key, wi in zip(keys, w):
        wi = float(wi)
        if not (0.0 < wi <= 0.5):
            raise InputError(f"compatible weight must be in (0, 1/2], got {wi}")
        t_act, kept = point_timeline(oracle, key, wi, params)
        t_acts.append(t_act)
        for ell in kept.tolist():
            entries.append(SummaryEntry(key[0], key[1], int(ell), wi, t_act))
    return entries, t_acts


def build_summary(ds: Dataset, w, params: GreedyParams | TimelineParams, oracle: RandomOracle):
    tp = params.timeline if isinstance(params, GreedyParams) else params
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    entries, t_acts = summarize_points(point_keys(ds), w, tp, oracle)
    return TimelineMaskSummary(entries, tp.t0, tp.gamma, tp.t_e), t_acts


# ---- assignment ----------------------------------------------------------------

def entry_denominator(weight: float, ell: int, t_act: int, keep: float) -> float:
    w_eff = min(weight, 1.0 / ell) if ell == t_act else weight
    return w_eff * keep


class AssignEngine:
    """Evaluates Assign for many points under many seeds at once.

    ``window`` selects which entries feed the sums for a point activated at
    t: ``"before"`` uses every entry with ell < t (the rule the sequential
    processes implement); ``"first"`` keeps only entries recorded at their
    point's own activation time.
    """

    def __init__(self, summary: TimelineMaskSummary, p: float, window: str = "before"):
        if window not in ("before", "first"):
            raise InputError(f"unknown window {window!r}")
        self.summary = summary
        self.p = p
        self.window = window
        ents = summary.entries
        if window == "first":
            ents = [e for e in ents if e.ell == e.t_act]
        self.node_keys = list(summary.nodes.keys())
        self.node_index = {k: i for i, k in enumerate(self.node_keys)}
        self.t0 = summary.t0
        tp = summary.params
        if ents:
            self.pts = np.array([e.point for e in ents], dtype=np.float64)
        else:
            self.pts = np.zeros((0, 1))
        self.ell = np.array([e.ell for e in ents], dtype=np.int64)
        self.den = np.array(
            [entry_denominator(e.weight, e.ell, e.t_act, tp.keep_rate(e.ell)) for e in ents], dtype=np.float64
        )
        self.enode = np.array([self.node_index[e.key] for e in ents], dtype=np.int64)

    def contributions(self, x, t_act: int) -> np.ndarray:
        idx = int(np.searchsorted(self.ell, t_act, side="left"))
        if idx == 0:
            return np.zeros(0)
        return distances_from(np.asarray(x, dtype=np.float64), self.pts[:idx], self.p) / self.den[:idx]

    def _greedy_bits(self, x, t_act: int, node_bits: np.ndarray) -> np.ndarray:
        c = self.contributions(x, t_act)
        S = node_bits.shape[0]
        if c.size == 0:
            return np.zeros(S, dtype=np.uint8)
        b = node_bits[:, self.enode[: c.size]].astype(np.float64)
        c1 = np.cumsum(b * c, axis=1)[:, -1]
        c0 = np.cumsum((1.0 - b) * c, axis=1)[:, -1]
        return (c0 > c1).astype(np.uint8)

    def bits(self, queries: Sequence[tuple[Key, int | None]], seed_bits: np.ndarray) -> np.ndarray:
        """Side bits (0 = side 0, 1 = side 1) of each query under each seed row.

        ``queries`` holds (key, activation time) pairs; ``None`` means not
        activated and always yields side 0.
        """
        seed_bits = np.atleast_2d(np.asarray(seed_bits, dtype=np.uint8))
        S = seed_bits.shape[0]
        if seed_bits.shape[1] != self.summary.m:
            raise InputError(f"seed has {seed_bits.shape[1]} bits, summary needs {self.summary.m}")
        out = np.zeros((S, len(queries)), dtype=np.uint8)
        horizon = max((t for _, t in queries if t is not None), default=0)
        if horizon == 0:
            return out
        node_bits = np.zeros((S, len(self.node_keys)), dtype=np.uint8)
        work: dict[Key, int] = {k: t for k, t in self.summary.nodes.items() if t <= horizon}
        for k, t in queries:
            if t is None:
                continue
            if k in self.summary.nodes and self.summary.nodes[k] != t:
                raise InputError(f"activation time {t} for {k[0]} disagrees with summary")
            work[k] = t
        result: dict[Key, np.ndarray] = {}
        for k, t in sorted(work.items(), key=lambda kv: (kv[1], kv[0])):
            if t <= self.t0:
                pos = self.summary.seed_pos.get(k)
                if pos is None:
                    raise InputError(f"point {k[0]} activated at {t} <= t0 but absent from the summary")
                v = seed_bits[:, pos]
            else:
                v = self._greedy_bits(k[0], t, node_bits)
            j = self.node_index.get(k)
            if j is not None:
                node_bits[:, j] = v
            result[k] = v
        for q, (k, t) in enumerate(queries):
            if t is not None:
                out[:, q] = result[k]
        return out


def seed_bits_from_int(values: Iterable[int], m: int) -> np.ndarray:
    """Seed integers to bit rows; bit 1 of the seed is the most significant."""
    vals = np.asarray(list(values), dtype=np.int64)
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    return ((vals[:, None] >> shifts[None, :]) & 1).astype(np.uint8)


def assign(x, t_act: int | None, seed, summary: TimelineMaskSummary, ds: Dataset | None = None,
           mode: str = STATIC, dup: int = 0, p: float | None = None) -> tuple[int, int]:
    """Single-point Assign; returns (1, 0) or (0, 1)."""
    if t_act is None:
        return (1, 0)
    if p is None:
        if ds is None:
            raise InputError("need a dataset or p")
        p = ds.p
    engine = AssignEngine(summary, p)
    bit = int(engine.bits([((tuple(float(c) for c in x), dup), t_act)], np.asarray(seed, dtype=np.uint8)[None, :])[0, 0])
    return (1 - bit, bit)


def bits_to_cut(bits: Sequence[int]) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int8)
    return np.stack([1 - b, b], axis=1)


# ---- sequential oracle ---------------------------------------------------------

def greedy_process_oracle(ds: Dataset, w, params: GreedyParams | TimelineParams, z_star, oracle: RandomOracle):
    """Round-by-round simulation reusing the oracle's timeline and mask variates.

    Returns (partial cut, m, sigma*).  The greedy sums are compared without
    the common 1/(t-1) factor, and C0 = C1 resolves to side 0 as in Assign.
    """
    tp = params.timeline if isinstance(params, GreedyParams) else params
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.int8)
    n = ds.n
    keys = point_keys(ds)
    owners = [owner_of(k[0], k[1]) for k in keys]
    U = np.stack([timeline_uniforms(oracle, o, tp.t_e) for o in owners])
    V = np.stack([mask_uniforms(oracle, o, tp.t_e) for o in owners])
    lex = sorted(range(n), key=lambda i: keys[i])
    rank = {i: r for r, i in enumerate(lex)}
    z = np.zeros((n, 2), dtype=np.int8)
    activated = np.zeros(n, dtype=bool)
    kept_pairs: list[tuple[int, float]] = []  # (j, denominator), canonical order
    for t in range(1, tp.t_e + 1):
        w_t = np.where(activated, w, np.minimum(w, 1.0 / t))
        keep = tp.keep_rate(t)
        a_t = U[:, t - 1] <= w_t
        k_t = V[:, t - 1] <= keep
        newly = np.flatnonzero(a_t & ~activated)
        for i in newly.tolist():
            if t <= tp.t0:
                z[i] = z_star[i]
                continue
            c0 = 0.0
            c1 = 0.0
            if kept_pairs:
                js = [j for j, _ in kept_pairs]
                dist = distances_from(ds.points[i], ds.points[js], ds.p)
                for (j, den), dj in zip(kept_pairs, dist.tolist()):
                    if z[j, 1]:
                        c1 += dj / den
                    else:
                        c0 += dj / den
            z[i] = (0, 1) if c0 > c1 else (1, 0)
        for j in sorted(np.flatnonzero(a_t & k_t).tolist(), key=lambda j: rank[j]):
            w_eff = w_t[j] if not activated[j] else w[j]
            kept_pairs.append((j, float(w_eff) * keep))
        activated |= a_t
    seeds = [i for i in lex if activated[i] and _activated_by(U[i], w[i], tp.t0)]
    sigma = np.array([int(z_star[i, 1]) for i in seeds], dtype=np.uint8)
    return z, len(seeds), sigma


def _activated_by(u: np.ndarray, w: float, t: int) -> bool:
    ta = first_activation(u, w)
    return ta is not None and ta <= t


# ---- reference pipeline -----------------------------------------------------------

@dataclass
class PipelineResult:
    cut: np.ndarray
    report: dict
    summary: TimelineMaskSummary
    t_acts: list
    sigma: np.ndarray
    weights: np.ndarray = field(repr=False, default=None)


def resolve_weights(ds: Dataset, weight_mode, oracle: RandomOracle):
    from .weights import dynamic_weight_oracle, exact_weights, sketched_weights

    if weight_mode in (None, "exact"):
        return exact_weights(ds)
    if isinstance(weight_mode, str):
        weight_mode = parse_weight_mode(weight_mode)
    kind = weight_mode[0]
    if kind == "exact":
        return exact_weights(ds)
    if kind == "sketched":
        return sketched_weights(ds, weight_mode[1], weight_mode[2], oracle)
    if kind == "dynamic":
        return dynamic_weight_oracle(ds, weight_mode[1], oracle)
    raise InputError(f"unknown weight mode {weight_mode!r}")


def parse_weight_mode(text: str):
    parts = text.split(":")
    if parts[0] == "exact" and len(parts) == 1:
        return ("exact",)
    if parts[0] == "sketched" and len(parts) == 3:
        return ("sketched", float(parts[1]), float(parts[2]))
    if parts[0] == "dynamic" and len(parts) == 2:
        return ("dynamic", float(parts[1]))
    raise InputError(f"bad --weights value {text!r}; use exact|sketched:<eps>:<delta>|dynamic:<D>")


def run_reference_pipeline(ds: Dataset, eps: float, weight_mode="exact", oracle: RandomOracle | None = None, *,
                           lam: float = 8.0, params: GreedyParams | None = None, compat_weights=None,
                           seed_override=None, xi: float | None = None, seed_cap: int = 24,
                           delta: float | None = None) -> PipelineResult:
    """Shared-memory pipeline: weights, summary, seed selection, full assignment."""
    from .seedselect import draw_check_set, select_seed, xi_value
    from .weights import ZERO_TOTAL_MSG, compatible_transform

    oracle = oracle or RandomOracle()
    if ds.n < 2 or len({tuple(r) for r in ds.points.tolist()}) < 2:
        raise InputError(ZERO_TOTAL_MSG if ds.n >= 2 else "fewer than two distinct points")
    failed = False
    if compat_weights is None:
        wv = resolve_weights(ds, weight_mode, oracle)
        failed = wv.failed
        cw = compatible_transform(wv).w
    else:
        cw = np.asarray(getattr(compat_weights, "w", compat_weights), dtype=np.float64)
    if params is None:
        params = compute_params(ds.n, eps, lam)
    summary, t_acts = build_summary(ds, cw, params, oracle)
    keys = point_keys(ds)
    engine = AssignEngine(summary, ds.p)
    delta = eps if delta is None else delta
    info: dict = {}
    if seed_override is not None:
        sigma = np.asarray(seed_override, dtype=np.uint8).reshape(-1)
        xi_used = None
        check = []
    else:
        xi_used = xi if xi is not None else xi_value(summary.m, ds.n, eps, params.lam, delta, cap=seed_cap)
        check = draw_check_set(keys, cw, xi_used, oracle)
        sigma, info = select_seed(
            engine, [(keys[i], t_acts[i]) for i in check], np.minimum(xi_used * cw[check], 1.0),
            summary.m, ds.p, oracle=oracle, cap=seed_cap,
        )
    bits = engine.bits(list(zip(keys, t_acts)), sigma[None, :])[0]
    cut = bits_to_cut(bits)
    report = {
        "n": ds.n, "d": ds.d, "p": ds.p, "epsilon": eps,
        "params": params.as_dict() | {"xi": xi_used},
        "summary_size": len(summary), "seed_len": summary.m,
        "sigma": "".join(str(int(b)) for b in sigma),
        "check_size": len(check), "activated": sum(t is not None for t in t_acts),
        "f_value": objective_f(ds, cut), "cut_value": cut_value(ds, cut),
        "weight_failure": failed,
    } | info
    return PipelineResult(cut, report, summary, t_acts, sigma, cw)
