"""Round-based MPC simulator with per-machine word budgets, and the
weight computation and max-cut protocols run on top of it.

Machines only interact through ``Cluster.exchange``; every round checks that
no machine sends or receives more than ``s`` words and that resident memory
plus incoming messages stays within ``s``.  Trees have branching factor
floor(sqrt(s)); tree messages are sized to the receiver's free space, so
payloads larger than that are pipelined over consecutive rounds.
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, InputError, cut_value, degree_of, objective_f
from .greedy import (
    AssignEngine,
    GreedyParams,
    SummaryEntry,
    TimelineMaskSummary,
    bits_to_cut,
    compute_params,
    summarize_points,
)
from .randoracle import TAG_WEIGHT, RandomOracle, owner_of
from .seedselect import SEED_CAP, inclusion_uniform, select_seed, xi_value
from .weights import ZERO_TOTAL_MSG, sketch_failed, sketch_words


class BudgetError(RuntimeError):
    """A machine exceeded its word budget."""


@dataclass
class RoundLog:
    index: int
    phase: str
    peak: list[int]
    sent: list[int]
    received: list[int]


@dataclass
class Machine:
    id: int
    store: dict = field(default_factory=dict)  # name -> (value, words)

    @property
    def resident(self) -> int:
        return sum(w for _, w in self.store.values())

    def put(self, name: str, value, words: int) -> None:
        self.store[name] = (value, int(words))

    def get(self, name: str, default=None):
        v = self.store.get(name)
        return default if v is None else v[0]

    def drop(self, name: str) -> None:
        self.store.pop(name, None)


class Cluster:
    def __init__(self, s: int, machines: int, schedule_key: int | None = None):
        if s < 4:
            raise InputError("need at least 4 words per machine")
        if machines < 1:
            raise InputError("need at least one machine")
        self.s = int(s)
        self.M = int(machines)
        self.b = max(2, math.isqrt(self.s))
        self.chunk = max(1, math.isqrt(self.s))
        self.machines = [Machine(i) for i in range(self.M)]
        self.logs: list[RoundLog] = []
        self._order = list(range(self.M))
        if schedule_key is not None:
            np.random.default_rng(schedule_key).shuffle(self._order)

    # tree shape: heap order, children of k are k*b+1 .. k*b+b
    def parent(self, k: int) -> int:
        return (k - 1) // self.b

    def children(self, k: int) -> range:
        lo = k * self.b + 1
        return range(min(lo, self.M), min(lo + self.b, self.M))

    def depth_of(self, k: int) -> int:
        dep = 0
        while k > 0:
            k = self.parent(k)
            dep += 1
        return dep

    @property
    def depth(self) -> int:
        return self.depth_of(self.M - 1)

    @property
    def rounds(self) -> int:
        return len(self.logs)

    def local(self, fn: Callable[[Machine], None], phase: str = "local") -> None:
        for k in self._order:
            fn(self.machines[k])
        for m in self.machines:
            if m.resident > self.s:
                raise BudgetError(f"{phase}: machine {m.id} holds {m.resident} > {self.s} words")

    def exchange(self, phase: str, messages: Sequence[tuple[int, int, object, int]]) -> dict[int, list]:
        """Deliver (src, dst, payload, words) messages in one synchronous round."""
        sent = [0] * self.M
        recv = [0] * self.M
        inbox: dict[int, list] = {k: [] for k in range(self.M)}
        for src, dst, payload, words in messages:
            if src != dst:
                sent[src] += words
                recv[dst] += words
            inbox[dst].append((src, payload))
        peak = [self.machines[k].resident + recv[k] for k in range(self.M)]
        self.logs.append(RoundLog(len(self.logs) + 1, phase, peak, sent, recv))
        for k in range(self.M):
            if sent[k] > self.s or recv[k] > self.s or peak[k] > self.s:
                raise BudgetError(
                    f"{phase}: machine {k} sent {sent[k]}, received {recv[k]}, peak {peak[k]} (s={self.s})"
                )
        return inbox

    @property
    def peak_words(self) -> int:
        per_round = max((max(l.peak) for l in self.logs), default=0)
        return max(per_round, max(m.resident for m in self.machines))


# ---- collectives ------------------------------------------------------------

def gather_up(cluster: Cluster, phase: str, items: list[list[tuple[object, int]]]) -> list:
    """Union of every machine's (item, words) list, collected at machine 0.

    Each round a machine forwards as much of its queue as fits in an equal
    share of its parent's free space (parents are settled first, so their
    own outgoing traffic is already accounted for).
    """
    M, s = cluster.M, cluster.s
    queues = [list(items[k]) for k in range(M)]
    name = f"{phase}:queue"
    for k in range(M):
        cluster.machines[k].put(name, None, sum(w for _, w in queues[k]))
    while any(queues[k] for k in range(1, M)):
        busy = Counter(cluster.parent(k) for k in range(1, M) if queues[k])
        msgs = []
        for k in range(1, M):
            q = queues[k]
            if not q:
                continue
            par = cluster.parent(k)
            share = min(s, (s - cluster.machines[par].resident) // busy[par])
            take, used = 0, 0
            while take < len(q) and used + q[take][1] <= share:
                used += q[take][1]
                take += 1
            if take == 0:
                if q[0][1] > s or par == 0:
                    raise BudgetError(f"{phase}: machine {par} has no room for a {q[0][1]}-word item (s={s})")
                continue  # the parent drains this round
            msgs.append((k, par, q[:take], used))
            del q[:take]
            cluster.machines[k].put(name, None, sum(w for _, w in q))
        if not msgs:
            raise BudgetError(f"{phase}: no machine can forward (s={s})")
        inbox = cluster.exchange(phase, msgs)
        for dst in range(M):
            for _, payload in sorted(inbox[dst], key=lambda sp: sp[0]):
                queues[dst].extend(payload)
            cluster.machines[dst].put(name, None, sum(w for _, w in queues[dst]))
    for m in cluster.machines:
        m.drop(name)
    return [it for it, _ in queues[0]]


def converge_cast(cluster: Cluster, phase: str, values: list, op: Callable, words: int):
    """Associative aggregate of per-machine values, delivered to machine 0."""
    acc = list(values)
    h = cluster.depth
    for level in range(h, 0, -1):
        msgs = [(k, cluster.parent(k), acc[k], words) for k in range(1, cluster.M) if cluster.depth_of(k) == level]
        inbox = cluster.exchange(phase, msgs)
        for dst, got in inbox.items():
            for _, v in sorted(got, key=lambda sp: sp[0]):
                acc[dst] = op(acc[dst], v)
    return acc[0]


def broadcast(cluster: Cluster, phase: str, items: list[tuple[object, int]], name: str) -> None:
    """Every machine ends up storing the root's item list under ``name``.

    A machine sends the same part to all its children, sized to fit both its
    own outgoing budget and the fullest child's free space.
    """
    M, s = cluster.M, cluster.s
    have = [list(items)] + [[] for _ in range(M - 1)]
    fwd = [0] * M
    total = len(items)
    cluster.machines[0].put(name, [it for it, _ in items], sum(w for _, w in items))
    while any(len(have[k]) < total for k in range(M)):
        msgs = []
        for k in range(M):
            kids = cluster.children(k)
            if not kids or fwd[k] >= len(have[k]):
                continue
            room = min([s // len(kids)] + [s - cluster.machines[c].resident for c in kids])
            take, used = 0, 0
            while fwd[k] + take < len(have[k]) and used + have[k][fwd[k] + take][1] <= room:
                used += have[k][fwd[k] + take][1]
                take += 1
            if take == 0:
                raise BudgetError(f"{phase}: children of machine {k} have no room for the next item (s={s})")
            part = have[k][fwd[k]:fwd[k] + take]
            fwd[k] += take
            for c in kids:
                msgs.append((k, c, part, used))
        inbox = cluster.exchange(phase, msgs)
        for dst, got in inbox.items():
            for _, part in got:
                have[dst].extend(part)
            if got:
                cluster.machines[dst].put(name, [it for it, _ in have[dst]], sum(w for _, w in have[dst]))


# ---- sorting -------------------------------------------------------------------

def load_world(ds: Dataset, s: int, machines: int | None = None, schedule_key: int | None = None) -> Cluster:
    """Contiguous blocks of the dataset, one block per machine."""
    n, d = ds.n, ds.d
    item_words = d + 1
    if machines is None:
        machines = max(1, math.ceil(4 * n * item_words / s))
    cl = Cluster(s, machines, schedule_key)
    bounds = np.linspace(0, n, cl.M + 1).round().astype(int)
    for k, m in enumerate(cl.machines):
        block = [(tuple(ds.points[i].tolist()), i) for i in range(bounds[k], bounds[k + 1])]
        m.put("items", block, len(block) * item_words)
    cl.d = d
    cl.p = ds.p
    return cl


def mpc_sort(cluster: Cluster) -> None:
    """Regular-sampling sort by (coords, dataset index).

    Afterwards machine k holds the k-th block of the sorted order, each item
    tagged with its global rank and its duplicate index (the number of equal
    points earlier in dataset order).
    """
    M = cluster.M
    d = cluster.d
    kw = d + 1

    def local_sort(m):
        items = sorted(m.get("items"), key=lambda it: (it[0], it[1]))
        m.put("items", items, len(items) * kw)
        step = len(items) / M
        samples = [items[int(j * step)] for j in range(1, M)] if items and M > 1 else []
        m.put("samples", samples, len(samples) * kw)

    cluster.local(local_sort, "sort-local")
    if M > 1:
        samples = gather_up(cluster, "sort-samples", [[(x, kw) for x in cluster.machines[k].get("samples")] for k in range(M)])
        samples.sort(key=lambda it: (it[0], it[1]))
        splitters = [samples[int(j * len(samples) / M)] for j in range(1, M)] if samples else []
        broadcast(cluster, "sort-splitters", [(sp, kw) for sp in splitters], "splitters")
    for m in cluster.machines:
        m.drop("samples")

    msgs = []
    for m in cluster.machines:
        spl = m.get("splitters", [])
        spl_keys = [(x, i) for x, i in spl]
        buckets: dict[int, list] = {}
        for it in m.get("items"):
            buckets.setdefault(bisect.bisect_right(spl_keys, it), []).append(it)
        for dst, lst in buckets.items():
            msgs.append((m.id, dst, lst, len(lst) * kw))
        m.drop("items")
        m.drop("splitters")
    inbox = cluster.exchange("sort-route", msgs)

    def bucket_sort(m):
        got = [it for _, lst in inbox[m.id] for it in lst]
        got.sort(key=lambda it: (it[0], it[1]))
        m.put("items", got, len(got) * kw)

    cluster.local(bucket_sort, "sort-bucket")


def _run_info(items) -> tuple:
    """(count, first coords, last coords, length of the trailing equal run)."""
    if not items:
        return (0, None, None, 0)
    last = items[-1][0]
    run = 0
    for x, _ in reversed(items):
        if x != last:
            break
        run += 1
    return (len(items), items[0][0], last, run)


def _offsets_and_carries(infos: list[tuple]) -> list[tuple[int, int]]:
    out = []
    offset = 0
    prev_key, prev_run = None, 0
    for cnt, first, last, run in infos:
        carry = prev_run if cnt and first == prev_key else 0
        out.append((offset, carry))
        if cnt:
            offset += cnt
            if first == last and first == prev_key:
                prev_run = prev_run + cnt
            else:
                prev_run = run
            prev_key = last
    return out


# ---- weights -------------------------------------------------------------------

class _SimulatedSketch:
    """Stands in for a linear weight sketch; decoding reads the true multiset.

    Only its declared word cost enters the budget ledger.
    """

    def __init__(self, points: np.ndarray, p: float):
        self.points = points
        self.p = p


def mpc_compute_weights(cluster: Cluster, ds: Dataset, weight_mode, oracle: RandomOracle) -> dict:
    """Sort, sketch, decode degrees, aggregate D, set weights at the holders."""
    mpc_sort(cluster)
    M, d = cluster.M, cluster.d
    kw = d + 1
    infos = [_run_info(m.get("items")) for m in cluster.machines]
    exact = weight_mode[0] == "exact"
    summaries = [[((k, infos[k]), 2 * d + 3)] for k in range(M)]
    if exact:
        # the exact sketch is the point set itself: n*d words
        for k in range(M):
            summaries[k] += [(("pt", x), d) for x, _ in cluster.machines[k].get("items")]
    collected = gather_up(cluster, "weights-sketch-up", summaries) if M > 1 else [it for it, _ in summaries[0]]
    run_infos = sorted((it for it in collected if not isinstance(it[0], str)), key=lambda kv: kv[0])
    plan = _offsets_and_carries([info for _, info in run_infos])
    n = sum(info[0] for _, info in run_infos)
    if exact:
        pts = np.array(sorted(x for tag, x in collected if isinstance(tag, str)), dtype=np.float64)
        sketch, sk_words = pts, n * d
    else:
        sketch, sk_words = _SimulatedSketch(ds.points, ds.p), sketch_words(n, d, weight_mode[1], weight_mode[2])
    broadcast(cluster, "weights-plan-down", [(tuple(plan), 2 * M), (n, 1)], "plan")
    # the sketch rides in sqrt(s)-word pieces; its content is attached to the first
    pieces = max(1, math.ceil(sk_words / cluster.chunk))
    piece_words = [min(cluster.chunk, sk_words - j * cluster.chunk) for j in range(pieces)] if sk_words else [0]
    broadcast(cluster, "weights-sketch-down", [((j, sketch if j == 0 else None), w) for j, w in enumerate(piece_words)], "sketch")

    def decode(m):
        offset, carry = m.get("plan")[0][m.id]
        items = m.get("items")
        sk = m.get("sketch")[0][1]
        ref_pts = sk.points if isinstance(sk, _SimulatedSketch) else sk
        out = []
        run_key, run = None, 0
        for r, (x, gid) in enumerate(items):
            if x == run_key:
                run += 1
            else:
                run_key = x
                run = carry if r == 0 else 0
            out.append({"x": x, "gid": gid, "rank": offset + r, "dup": run,
                        "deg": degree_of(np.asarray(x), ref_pts, cluster.p)})
        m.put("items", out, len(out) * (kw + 3))
        m.put("partial", sum((Fraction(o["deg"]) for o in out), Fraction(0)), 2)

    cluster.local(decode, "weights-decode")
    for m in cluster.machines:
        m.drop("sketch")
    total = converge_cast(cluster, "weights-total-up", [m.get("partial") for m in cluster.machines], lambda a, b: a + b, 2)
    D = float(total)
    if D == 0:
        raise InputError(ZERO_TOTAL_MSG)
    broadcast(cluster, "weights-total-down", [(D, 1)], "total")

    def set_weights(m):
        for o in m.get("items"):
            w = o["deg"] / D
            if not exact:
                mult = oracle.uniform(owner_of(o["x"], o["dup"]) + TAG_WEIGHT)
                w = min(w * (1.0 + weight_mode[1] * mult), 1.0)
            o["w"] = w
        m.drop("partial")
        m.drop("plan")

    cluster.local(set_weights, "weights-set")
    failed = (not exact) and sketch_failed(oracle, weight_mode[2])
    return {"n": n, "total": D, "sketch_words": sk_words, "sketch_failed": failed}


# ---- max cut ---------------------------------------------------------------------

@dataclass
class MPCResult:
    cut: np.ndarray
    failed: bool
    error: str | None
    rounds: int
    peak_words: int
    logs: list[RoundLog]
    report: dict
    sigma: np.ndarray | None = None


def round_ceiling(n: int, s: int, const: int = 7) -> int:
    return 7 * math.ceil(math.log(max(n, 2)) / math.log(s)) + const


def mpc_e_max_cut(ds: Dataset, eps: float, s: int, machines: int | None = None, weight_mode=("exact",),
                  oracle: RandomOracle | None = None, *, schedule_key: int | None = None,
                  seed_cap: int = SEED_CAP, params: GreedyParams | None = None, xi: float | None = None,
                  delta: float | None = None) -> MPCResult:
    from .greedy import parse_weight_mode

    oracle = oracle or RandomOracle()
    if isinstance(weight_mode, str):
        weight_mode = parse_weight_mode(weight_mode)
    if ds.n < 2 or len({tuple(r) for r in ds.points.tolist()}) < 2:
        raise InputError(ZERO_TOTAL_MSG if ds.n >= 2 else "fewer than two distinct points")
    cluster = load_world(ds, s, machines, schedule_key)
    d = ds.d
    delta = eps if delta is None else delta
    report: dict = {"machines": cluster.M, "s": cluster.s, "tree_depth": cluster.depth}
    sigma = None
    try:
        winfo = mpc_compute_weights(cluster, ds, weight_mode, oracle)
        report.update(winfo)
        n = winfo["n"]
        prm = params or compute_params(n, eps, 8.0)
        tp = prm.timeline
        xi_cap = xi if xi is not None else xi_value(seed_cap, n, eps, prm.lam, delta, cap=seed_cap)
        entry_words = d + 4  # point, duplicate index, time, weight, activation time

        def local_summary(m):
            items = m.get("items")
            keys = [(o["x"], o["dup"]) for o in items]
            wp = [o["w"] / 2.0 for o in items]
            entries, t_acts = summarize_points(keys, wp, tp, oracle)
            checks = []
            for key, w_i, t_i in zip(keys, wp, t_acts):
                u = inclusion_uniform(oracle, key)
                if u < min(xi_cap * w_i, 1.0):
                    checks.append((key, w_i, t_i, u))
            for o, t_i in zip(items, t_acts):
                o["t_act"] = t_i
            m.put("P", entries, len(entries) * entry_words)
            m.put("C", checks, len(checks) * (d + 4))

        cluster.local(local_summary, "cut-local-summary")
        up = [[(("P", e), entry_words) for e in m.get("P")] + [(("C", c), d + 4) for c in m.get("C")]
              for m in cluster.machines]
        for m in cluster.machines:
            m.drop("P")
            m.drop("C")
        got = gather_up(cluster, "cut-summary-up", up) if cluster.M > 1 else [it for it, _ in up[0]]
        entries = [e for tag, e in got if tag == "P"]
        checks = [c for tag, c in got if tag == "C"]
        root = cluster.machines[0]
        root.put("P", entries, len(entries) * entry_words)
        root.put("C", checks, len(checks) * (d + 4))
        summary = TimelineMaskSummary(list(entries), tp.t0, tp.gamma, tp.t_e)
        m_seed = summary.m
        xi_used = xi if xi is not None else xi_value(m_seed, n, eps, prm.lam, delta, cap=seed_cap)
        chosen = [(key, w_i, t_i) for key, w_i, t_i, u in checks if u < min(xi_used * w_i, 1.0)]
        engine = AssignEngine(summary, ds.p)
        sigma, sinfo = select_seed(
            engine, [(k, t) for k, _, t in chosen], np.array([min(xi_used * w, 1.0) for _, w, _ in chosen]),
            m_seed, ds.p, oracle=oracle, cap=seed_cap,
        )
        root.drop("C")
        report.update({"summary_size": len(entries), "seed_len": m_seed, "check_size": len(chosen), "xi": xi_used,
                       "params": prm.as_dict()} | sinfo)
        root.drop("P")
        down = [(("P", e), entry_words) for e in summary.entries] + [(("sigma", tuple(int(b) for b in sigma)), max(1, math.ceil(m_seed / 64)))]
        broadcast(cluster, "cut-summary-down", down, "PS")

        def local_assign(m):
            got = m.get("PS")
            ents = [e for tag, e in got if tag == "P"]
            sig = np.array(next(v for tag, v in got if tag == "sigma"), dtype=np.uint8)
            local = AssignEngine(TimelineMaskSummary(ents, tp.t0, tp.gamma, tp.t_e), cluster.p)
            items = m.get("items")
            bits = local.bits([((o["x"], o["dup"]), o["t_act"]) for o in items], sig[None, :])[0]
            for o, b in zip(items, bits.tolist()):
                o["side"] = int(b)

        cluster.local(local_assign, "cut-assign")
        bits = np.zeros(ds.n, dtype=np.int8)
        for m in cluster.machines:
            for o in m.get("items"):
                bits[o["gid"]] = o["side"]
        cut = bits_to_cut(bits)
        failed, error = False, None
    except BudgetError as exc:
        cut = bits_to_cut(np.zeros(ds.n, dtype=np.int8))
        failed, error = True, str(exc)
    report.update({"rounds": cluster.rounds, "peak_words": cluster.peak_words, "failed": failed, "error": error,
                   "round_ceiling": round_ceiling(ds.n, cluster.s),
                   "f_value": objective_f(ds, cut), "cut_value": cut_value(ds, cut)})
    return MPCResult(cut, failed, error, cluster.rounds, cluster.peak_words, cluster.logs, report, sigma)


def round_log_csv(logs: Sequence[RoundLog]) -> str:
    lines = ["round,phase,machine,peak_words,sent_words,received_words"]
    for lg in logs:
        for k in range(len(lg.peak)):
            lines.append(f"{lg.index},{lg.phase},{k},{lg.peak[k]},{lg.sent[k]},{lg.received[k]}")
    return "\n".join(lines) + "\n"
