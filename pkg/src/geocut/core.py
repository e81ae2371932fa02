"""Points, l_p distances, cut matrices, the internal-distance objective and
the brute-force optimum used as a test oracle."""

from __future__ import annotations

import itertools
import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InputError(ValueError):
    """Raised for malformed or inconsistent inputs."""


class RefusalError(RuntimeError):
    """Raised when a request exceeds a configured safety cap."""


BRUTE_FORCE_CAP = 20

SIDE0 = (1, 0)
SIDE1 = (0, 1)


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray  # shape (n, d), float64
    p: float = 2.0
    delta: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise InputError("points must form an (n, d) array with d >= 1")
        if self.p < 1:
            raise InputError(f"p must be >= 1, got {self.p}")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def point(self, i: int) -> tuple:
        return tuple(float(c) for c in self.points[i])

    def check_grid(self) -> None:
        """Streaming-mode checks: integer coordinates in [1, delta], no duplicates."""
        if self.delta is None:
            raise InputError("streaming mode needs a grid bound delta")
        pts = self.points
        if np.any(pts != np.round(pts)) or np.any(pts < 1) or np.any(pts > self.delta):
            raise InputError(f"coordinates must be integers in [1, {self.delta}]")
        if len({tuple(r) for r in pts.tolist()}) != self.n:
            raise InputError("duplicate points are not allowed in streaming mode")


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def distances_from(x, ys, p: float) -> np.ndarray:
    """Distances from one point to each row of ``ys``.

    Coordinates are accumulated one column at a time, so the value for a pair
    does not depend on which other rows are in the batch.
    """
    x = _as_array(x)
    ys = _as_array(ys)
    if ys.ndim == 1:
        ys = ys.reshape(1, -1)
    if ys.shape[1] != x.shape[0]:
        raise InputError(f"dimension mismatch: {x.shape[0]} vs {ys.shape[1]}")
    diff = np.abs(ys - x)
    if p == 1:
        acc = diff[:, 0].copy()
        for k in range(1, diff.shape[1]):
            acc += diff[:, k]
        return acc
    if p == 2:
        sq = diff * diff
        acc = sq[:, 0].copy()
        for k in range(1, sq.shape[1]):
            acc += sq[:, k]
        return np.sqrt(acc)
    pw = diff ** p
    acc = pw[:, 0].copy()
    for k in range(1, pw.shape[1]):
        acc += pw[:, k]
    return acc ** (1.0 / p)


def distance(a, b, p: float) -> float:
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if p < 1:
        raise InputError(f"p must be >= 1, got {p}")
    return float(distances_from(a, b.reshape(1, -1), p)[0])


def pairwise(ds: Dataset) -> np.ndarray:
    return np.stack([distances_from(ds.points[i], ds.points, ds.p) for i in range(ds.n)])


@dataclass(frozen=True)
class DistanceSummary:
    total: float
    degrees: np.ndarray


def degree_of(x, points: np.ndarray, p: float) -> float:
    # fsum is correctly rounded, so the result is independent of row order.
    return math.fsum(distances_from(x, points, p).tolist())


def distance_summary(ds: Dataset) -> DistanceSummary:
    degrees = np.array([degree_of(ds.points[i], ds.points, ds.p) for i in range(ds.n)])
    return DistanceSummary(total=math.fsum(degrees.tolist()), degrees=degrees)


# ---- cuts -----------------------------------------------------------------

def as_cut(rows) -> np.ndarray:
    z = np.asarray(rows, dtype=np.int8)
    if z.ndim != 2 or z.shape[1] != 2:
        raise InputError("a cut is an (n, 2) matrix")
    if np.any((z != 0) & (z != 1)) or np.any(z.sum(axis=1) > 1):
        raise InputError("cut rows must be (0,0), (1,0) or (0,1)")
    return z


def cut_from_bits(bits: Iterable[int]) -> np.ndarray:
    b = np.asarray(list(bits), dtype=np.int8)
    return np.stack([1 - b, b], axis=1)


def is_complete(z: np.ndarray) -> bool:
    return bool(np.all(z.sum(axis=1) == 1))


def objective_f(ds: Dataset, z) -> float:
    z = as_cut(z)
    if z.shape[0] != ds.n:
        raise InputError(f"cut has {z.shape[0]} rows, dataset has {ds.n} points")
    D = pairwise(ds)
    same = np.outer(z[:, 0], z[:, 0]) + np.outer(z[:, 1], z[:, 1])
    return 0.5 * float((D * same).sum())


def cut_value(ds: Dataset, z) -> float:
    z = as_cut(z)
    if z.shape[0] != ds.n:
        raise InputError(f"cut has {z.shape[0]} rows, dataset has {ds.n} points")
    if not is_complete(z):
        raise InputError("cut_value needs a complete cut")
    D = pairwise(ds)
    differ = z[:, 1][:, None] != z[:, 1][None, :]
    return 0.5 * float((D * differ).sum())


def brute_force_opt(ds: Dataset, cap: int = BRUTE_FORCE_CAP) -> tuple[np.ndarray, float]:
    """Exhaustive minimum of f with point 0 pinned to side 0.

    Assignments are enumerated as integers 0 .. 2^(n-1)-1, bit k giving the
    side of point k+1; the first minimizer in that order is returned.
    """
    n = ds.n
    if n > cap:
        raise RefusalError(f"brute force refused: n={n} exceeds cap {cap}")
    if n <= 1:
        z = np.array([SIDE0] * n, dtype=np.int8).reshape(n, 2)
        return z, 0.0
    D = pairwise(ds)
    best_val = math.inf
    best_code = 0
    free = n - 1
    chunk = 1 << min(free, 14)
    for start in range(0, 1 << free, chunk):
        codes = np.arange(start, min(start + chunk, 1 << free), dtype=np.int64)
        bits = np.zeros((codes.size, n), dtype=np.float64)
        for k in range(free):
            bits[:, k + 1] = (codes >> k) & 1
        s = 2.0 * bits - 1.0
        # with +-1 labels s, f = (sum D + s^T D s) / 4
        quad = np.einsum("ci,ij,cj->c", s, D, s)
        vals = 0.25 * (D.sum() + quad)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_code = int(codes[k])
    bits = [0] + [(best_code >> k) & 1 for k in range(free)]
    z = cut_from_bits(bits)
    return z, objective_f(ds, z)


# ---- identities and encodings --------------------------------------------

def duplicate_indices(points: np.ndarray) -> list[int]:
    """For each row, how many identical rows precede it in dataset order."""
    seen: dict[tuple, int] = {}
    out = []
    for row in np.asarray(points).tolist():
        key = tuple(row)
        out.append(seen.get(key, 0))
        seen[key] = seen.get(key, 0) + 1
    return out


def encode_point(coords: Sequence[float], dup: int = 0) -> bytes:
    """Fixed-width owner encoding: uint32 d, float64 coords, uint32 dup index."""
    d = len(coords)
    return struct.pack(f"<I{d}dI", d, *[float(c) for c in coords], dup)


def canonical_order(points: np.ndarray, dups: Sequence[int]) -> list[int]:
    """Indices sorted lexicographically by (coords, dup index)."""
    rows = np.asarray(points).tolist()
    return sorted(range(len(rows)), key=lambda i: (rows[i], dups[i]))


# ---- dataset files ---------------------------------------------------------




def _parse_header(line: str) -> dict:
    out = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k.strip().lower()] = v.strip()
    return out


def _numbers(line: str) -> list[float]:
    return [float(t) for t in re.split(r"[,\s]+", line.strip()) if t]


def read_dataset(path: str, p: float | None = None, delta: int | None = None) -> Dataset:
    header: dict = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                header.update(_parse_header(s))
                continue
            rows.append(_numbers(s))
    if not rows:
        raise InputError(f"{path}: no points")
    d = len(rows[0])
    if any(len(r) != d for r in rows):
        raise InputError(f"{path}: rows have differing dimensions")
    if "d" in header and int(header["d"]) != d:
        raise InputError(f"{path}: header says d={header['d']} but rows have {d}")
    if p is None:
        p = float(header.get("p", 2.0))
    if delta is None and "delta" in header:
        delta = int(header["delta"])
    return Dataset(np.array(rows, dtype=np.float64), p=p, delta=delta)


def _fmt(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))


def write_dataset(ds: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        head = f"# d={ds.d} p={_fmt(ds.p)}"
        if ds.delta is not None:
            head += f" delta={ds.delta}"
        fh.write(head + "\n")
        for row in ds.points.tolist():
            fh.write(" ".join(_fmt(c) for c in row) + "\n")


def read_stream(path: str) -> tuple[list[tuple[str, tuple]], dict]:
    """Parse a stream file of ``+ c1 .. cd`` / ``- c1 .. cd`` lines."""
    header: dict = {}
    ops = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                header.update(_parse_header(s))
                continue
            sign, rest = s[0], s[1:]
            if sign not in "+-":
                raise InputError(f"{path}:{lineno}: expected '+' or '-'")
            ops.append((sign, tuple(_numbers(rest))))
    return ops, header


def write_stream(ops: Sequence[tuple[str, Sequence[float]]], path: str, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        for sign, pt in ops:
            fh.write(sign + " " + " ".join(_fmt(c) for c in pt) + "\n")


def enumerate_cuts(n: int):
    """All 2^(n-1) complete cuts with point 0 on side 0 (for tests)."""
    for rest in itertools.product((0, 1), repeat=n - 1):
        yield cut_from_bits((0,) + rest)
