"""Command-line experiment driver.

Subcommands: gen, ref, mpc, stream-insert, stream-dynamic, oracle, report.
Every run prints a JSON report (``"schema": 1``); ``--csv`` also writes one
row per repetition with the columns in ``CSV_COLUMNS``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import statistics
import sys
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BRUTE_FORCE_CAP,
    Dataset,
    InputError,
    RefusalError,
    brute_force_opt,
    cut_value,
    distance_summary,
    objective_f,
    read_dataset,
    read_stream,
    write_dataset,
)
from .randoracle import RandomOracle, key_from_env

SCHEMA = 1
BACKENDS = ("reference", "mpc", "stream-insert", "stream-dynamic", "oracle")
CSV_COLUMNS = (
    "rep", "backend", "key", "n", "f", "cut_value", "opt", "gap", "summary_size", "seed_len",
    "rounds", "peak_words", "words", "failed", "error",
)


# ---- dataset generation ----------------------------------------------------------

def gen_dataset(kind: str, n: int, d: int = 2, *, delta: int | None = None, k: int = 2, sigma: float = 1.0,
                key: bytes = b"\0" * 16, p: float = 2.0) -> Dataset:
    """uniform-grid (distinct points of [delta]^d), gaussian-clusters, or simplex."""
    rng = np.random.default_rng(int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little"))
    if n < 1:
        raise InputError("n must be positive")
    if kind == "uniform-grid":
        if delta is None:
            raise InputError("uniform-grid needs --delta")
        cells = delta ** d
        if n > cells:
            raise InputError(f"n={n} exceeds the {cells} grid points of [{delta}]^{d}")
        flat = rng.choice(cells, size=n, replace=False)
        pts = np.stack([(flat // delta ** j) % delta + 1 for j in range(d)], axis=1)
        return Dataset(pts.astype(np.float64), p=p, delta=delta)
    if kind == "gaussian-clusters":
        centers = rng.normal(0.0, 10.0, size=(k, d))
        labels = rng.integers(0, k, size=n)
        return Dataset(centers[labels] + rng.normal(0.0, sigma, size=(n, d)), p=p)
    if kind == "simplex":
        return Dataset(np.eye(n), p=p)
    raise InputError(f"unknown dataset kind {kind!r}")


# ---- experiments ------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    backend: str
    epsilon: float = 0.2
    key: bytes = b""
    repetitions: int = 1
    weights: str = "exact"
    oracle: bool = False
    dataset: Dataset | None = None
    ops: list = field(default_factory=list)
    delta: int | None = None
    d: int | None = None
    p: float = 2.0
    machines: int | None = None
    words: int | None = None
    n_hint: int | None = None
    D: float = 2.0
    eps_pr: float | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InputError(f"unknown backend {self.backend!r}")
        if self.repetitions < 1:
            raise InputError("repetitions must be >= 1")


def rep_key(key: bytes, rep: int) -> bytes:
    if rep == 0:
        return key
    return hashlib.blake2b(key + rep.to_bytes(4, "little"), digest_size=16, person=b"geocut-rep").digest()


def _row(rep: int, backend: str, key: bytes, ds: Dataset | None, cut, opt, **extra) -> dict:
    row = dict.fromkeys(CSV_COLUMNS)
    row.update(rep=rep, backend=backend, key=key.hex(), failed=False, error=None)
    if ds is not None:
        row["n"] = ds.n
        if cut is not None:
            row["f"] = objective_f(ds, cut)
            row["cut_value"] = cut_value(ds, cut)
        if opt is not None:
            row["opt"] = opt
            total = distance_summary(ds).total
            if row["f"] is not None and total > 0:
                row["gap"] = (row["f"] - opt) / total
    row.update(extra)
    return row


def _run_one(cfg: ExperimentConfig, rep: int, opt_cache: dict) -> dict:
    key = rep_key(cfg.key, rep)
    oracle = RandomOracle(key)
    if cfg.backend in ("reference", "mpc", "oracle"):
        ds = cfg.dataset
    else:
        ds = None
    try:
        if cfg.backend == "reference":
            from .greedy import run_reference_pipeline

            res = run_reference_pipeline(ds, cfg.epsilon, cfg.weights, oracle)
            r = res.report
            return _row(rep, "reference", key, ds, res.cut, _opt(cfg, ds, opt_cache),
                        summary_size=r["summary_size"], seed_len=r["seed_len"], failed=bool(r["weight_failure"]))
        if cfg.backend == "mpc":
            from .mpcsim import mpc_e_max_cut

            s = cfg.words or 1 << 20
            res = mpc_e_max_cut(ds, cfg.epsilon, s, cfg.machines, cfg.weights, oracle)
            r = res.report
            return _row(rep, "mpc", key, ds, res.cut, _opt(cfg, ds, opt_cache),
                        summary_size=r.get("summary_size"), seed_len=r.get("seed_len"), rounds=res.rounds,
                        peak_words=res.peak_words, failed=res.failed or bool(r.get("sketch_failed")),
                        error=res.error)
        if cfg.backend == "stream-insert":
            from .streamins import ins_add_point, ins_init, ins_preprocess, ins_query_all, ins_space_report

            pts = [x for op, x in cfg.ops if op == "+"]
            if len(pts) != len(cfg.ops):
                raise InputError("insertion-only streams accept '+' lines only")
            st = ins_init(cfg.delta, cfg.d, cfg.epsilon, oracle, p=cfg.p, n_hint=cfg.n_hint)
            for x in pts:
                ins_add_point(st, x)
            ins_preprocess(st)
            ds = Dataset(np.array(pts, dtype=np.float64), p=cfg.p, delta=cfg.delta)
            sp = ins_space_report(st)
            return _row(rep, "stream-insert", key, ds, ins_query_all(st, pts), _opt(cfg, ds, opt_cache),
                        summary_size=sp["P"], seed_len=sp["m"], words=sp["words"])
        if cfg.backend == "stream-dynamic":
            from .streamdyn import dyn_init, dyn_preprocess, dyn_query_all, dyn_space_report, dyn_update

            st = dyn_init(cfg.delta, cfg.d, cfg.epsilon, oracle, p=cfg.p, D=cfg.D)
            for op, x in cfg.ops:
                dyn_update(st, op, x)
            if cfg.eps_pr is not None:
                from .streamdyn import dyn_params

                st.params = dyn_params(len(st.survivors()), cfg.epsilon, cfg.D, eps_pr=cfg.eps_pr)
            dyn_preprocess(st)
            pts = st.survivors()
            ds = Dataset(np.array(pts, dtype=np.float64), p=cfg.p, delta=cfg.delta)
            sp = dyn_space_report(st)
            return _row(rep, "stream-dynamic", key, ds, dyn_query_all(st), _opt(cfg, ds, opt_cache),
                        summary_size=sp["P"], seed_len=sp["m"], failed=st.failed, error=st.failure)
        # oracle backend: the brute-force optimum itself
        z, opt = brute_force_opt(ds)
        return _row(rep, "oracle", key, ds, z, opt)
    except (InputError, RefusalError) as exc:
        row = _row(rep, cfg.backend, key, None, None, None)
        row.update(failed=True, error=str(exc))
        return row


def _opt(cfg: ExperimentConfig, ds: Dataset, cache: dict):
    if not cfg.oracle or ds.n > BRUTE_FORCE_CAP:
        return None
    k = ds.points.tobytes()
    if k not in cache:
        cache[k] = brute_force_opt(ds)[1]
    return cache[k]


def _aggregate(rows: list[dict]) -> dict:
    out = {}
    for col in ("f", "cut_value", "gap", "summary_size", "seed_len", "rounds", "peak_words", "words"):
        vals = [r[col] for r in rows if r.get(col) is not None]
        if vals:
            out[col] = {"mean": statistics.fmean(vals), "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0}
    out["failures"] = sum(bool(r["failed"]) for r in rows)
    return out


def run_experiment(cfg: ExperimentConfig) -> tuple[dict, list[dict]]:
    cache: dict = {}
    rows = [_run_one(cfg, rep, cache) for rep in range(cfg.repetitions)]
    report = {
        "schema": SCHEMA, "backend": cfg.backend, "epsilon": cfg.epsilon, "key": cfg.key.hex(),
        "repetitions": cfg.repetitions, "weights": cfg.weights, "rows": rows, "aggregate": _aggregate(rows),
    }
    return report, rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


# ---- argument handling ----------------------------------------------------------------

def _common(sp: argparse.ArgumentParser, eps: bool = True) -> None:
    sp.add_argument("--input", required=True)
    sp.add_argument("--seed", help="hex key; GEOCUT_SEED takes precedence")
    sp.add_argument("--repetitions", type=int, default=1)
    sp.add_argument("--oracle", action="store_true", help="also compute the brute-force optimum")
    sp.add_argument("--csv", help="write per-repetition rows here")
    sp.add_argument("--output", help="write the JSON report here instead of stdout")
    if eps:
        sp.add_argument("--epsilon", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geocut", description="Subsampled greedy Euclidean max-cut experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("kind", choices=("uniform-grid", "gaussian-clusters", "simplex"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--delta", type=int)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--p", type=float, default=2.0)
    g.add_argument("--seed")
    g.add_argument("--stream", action="store_true", help="write '+' lines for the streaming backends")
    g.add_argument("--output", required=True)

    r = sub.add_parser("ref", help="shared-memory reference pipeline")
    _common(r)
    r.add_argument("--weights", default="exact", help="exact | sketched:<eps>:<delta> | dynamic:<D>")

    m = sub.add_parser("mpc", help="MPC round simulator")
    _common(m)
    m.add_argument("--weights", default="exact")
    m.add_argument("--machines", type=int)
    m.add_argument("--words", type=int, default=1 << 20)
    m.add_argument("--rounds-csv", help="write the per-round log here")

    si = sub.add_parser("stream-insert", help="insertion-only streaming engine")
    _common(si)
    si.add_argument("--delta", type=int)
    si.add_argument("--p", type=float, default=2.0)
    si.add_argument("--n-hint", type=int)
    si.add_argument("--query-all", action="store_true", help="print each point's side")

    sd = sub.add_parser("stream-dynamic", help="dynamic streaming engine")
    _common(sd)
    sd.add_argument("--delta", type=int)
    sd.add_argument("--p", type=float, default=2.0)
    sd.add_argument("--D", type=float, default=2.0)
    sd.add_argument("--eps-pr", default="auto")
    sd.add_argument("--query-all", action="store_true")

    o = sub.add_parser("oracle", help="brute-force optimum")
    _common(o, eps=False)

    rp = sub.add_parser("report", help="aggregate per-repetition CSV files")
    rp.add_argument("files", nargs="+")
    return ap


def _emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _stream_config(args, backend: str) -> ExperimentConfig:
    ops, header = read_stream(args.input)
    if not ops:
        raise InputError(f"{args.input}: empty stream")
    delta = args.delta or (int(header["delta"]) if "delta" in header else None)
    if delta is None:
        raise InputError("streaming needs --delta or a delta= header")
    d = len(ops[0][1])
    cfg = ExperimentConfig(backend, args.epsilon, key_from_env(args.seed), args.repetitions, oracle=args.oracle,
                           ops=ops, delta=delta, d=d, p=args.p)
    if backend == "stream-insert":
        cfg.n_hint = args.n_hint
    else:
        cfg.D = args.D
        cfg.eps_pr = None if args.eps_pr == "auto" else float(args.eps_pr)
    return cfg


def _query_lines(cfg: ExperimentConfig) -> list[str]:
    key = cfg.key
    oracle = RandomOracle(key)
    if cfg.backend == "stream-insert":
        from .streamins import run_insertion_stream, ins_query_all

        pts = [x for _, x in cfg.ops]
        st = run_insertion_stream(pts, cfg.delta, cfg.epsilon, oracle, p=cfg.p, n_hint=cfg.n_hint)
        rows = ins_query_all(st, pts)
    else:
        from .streamdyn import dyn_init, dyn_params, dyn_preprocess, dyn_query_all, dyn_update

        st = dyn_init(cfg.delta, cfg.d, cfg.epsilon, oracle, p=cfg.p, D=cfg.D)
        for op, x in cfg.ops:
            dyn_update(st, op, x)
        if cfg.eps_pr is not None:
            st.params = dyn_params(len(st.survivors()), cfg.epsilon, cfg.D, eps_pr=cfg.eps_pr)
        dyn_preprocess(st)
        pts = st.survivors()
        rows = dyn_query_all(st)
    return [" ".join(str(int(c)) for c in x) + f" -> {int(r[1])}" for x, r in zip(pts, rows)]


def _report_files(files) -> dict:
    rows = []
    for path in files:
        with open(path, encoding="utf-8", newline="") as fh:
            for r in csv.DictReader(fh):
                conv = {}
                for k, v in r.items():
                    if v == "":
                        conv[k] = None
                    elif k in ("backend", "key", "error"):
                        conv[k] = v
                    elif k == "failed":
                        conv[k] = v == "True"
                    else:
                        conv[k] = float(v)
                rows.append(conv)
    return {"schema": SCHEMA, "files": list(files), "rows": len(rows), "aggregate": _aggregate(rows)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            key = key_from_env(args.seed)
            ds = gen_dataset(args.kind, args.n, args.d, delta=args.delta, k=args.k, sigma=args.sigma, key=key,
                             p=args.p)
            if args.stream:
                from .core import write_stream

                hdr = {"d": ds.d, "p": args.p} | ({"delta": ds.delta} if ds.delta else {})
                write_stream([("+", r) for r in ds.points.tolist()], args.output, hdr)
            else:
                write_dataset(ds, args.output)
            _emit({"schema": SCHEMA, "command": "gen", "kind": args.kind, "n": ds.n, "d": ds.d,
                   "key": key.hex(), "output": args.output}, None)
            return 0
        if args.command == "report":
            _emit(_report_files(args.files), None)
            return 0
        if args.command in ("stream-insert", "stream-dynamic"):
            cfg = _stream_config(args, args.command)
        else:
            backend = {"ref": "reference", "mpc": "mpc", "oracle": "oracle"}[args.command]
            cfg = ExperimentConfig(backend, getattr(args, "epsilon", 0.2), key_from_env(args.seed), args.repetitions,
                                   weights=getattr(args, "weights", "exact"), oracle=args.oracle,
                                   dataset=read_dataset(args.input))
            if backend == "mpc":
                cfg.machines, cfg.words = args.machines, args.words
        report, rows = run_experiment(cfg)
        if args.command == "mpc" and args.rounds_csv:
            from .mpcsim import mpc_e_max_cut, round_log_csv

            res = mpc_e_max_cut(cfg.dataset, cfg.epsilon, cfg.words, cfg.machines, cfg.weights, RandomOracle(cfg.key))
            with open(args.rounds_csv, "w", encoding="utf-8") as fh:
                fh.write(round_log_csv(res.logs))
        if args.csv:
            with open(args.csv, "w", encoding="utf-8") as fh:
                fh.write(rows_to_csv(rows))
        if getattr(args, "query_all", False):
            report["sides"] = _query_lines(cfg)
        _emit(report, args.output)
        return 0
    except (InputError, RefusalError, OSError) as exc:
        print(f"geocut: error: {exc}", file=sys.stderr)
        return 2
