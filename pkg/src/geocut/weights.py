"""Per-point sampling weights and metric compatibility.

Exact weights are normalized weighted degrees.  The sketched and dynamic
backends stand in for linear sketches: they return the exact weight times a
keyed multiplier, which reproduces the sandwich guarantee those sketches give.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Dataset, InputError, distance_summary, duplicate_indices, encode_point, pairwise
from .randoracle import GLOBAL_OWNER, TAG_FAIL, TAG_WEIGHT, RandomOracle

ZERO_TOTAL_MSG = "zero total distance, all cuts value 0"


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    lam: float | None = None
    sandwich: float = 1.0  # upper factor D in true <= w <= D * true
    failed: bool = False  # simulated sketch failure event

    def __len__(self):
        return len(self.w)


def owners(ds: Dataset) -> list[bytes]:
    dups = duplicate_indices(ds.points)
    return [encode_point(ds.points[i].tolist(), dups[i]) for i in range(ds.n)]


def _true_weights(ds: Dataset) -> np.ndarray:
    summ = distance_summary(ds)
    if summ.total == 0:
        raise InputError(ZERO_TOTAL_MSG)
    return summ.degrees / summ.total


def exact_weights(ds: Dataset) -> WeightVector:
    return WeightVector(_true_weights(ds), sandwich=1.0)


def _multipliers(ds: Dataset, oracle: RandomOracle) -> np.ndarray:
    return np.array([oracle.uniform(o + TAG_WEIGHT) for o in owners(ds)])


def sketch_words(n: int, d: int, eps: float, delta: float) -> int:
    """Declared size of a simulated weight sketch, (log2(nd/delta) / eps)^2 words."""
    return math.ceil((math.log2(max(2.0, n * d / delta)) / eps) ** 2)


def sketch_failed(oracle: RandomOracle, delta: float, tag: bytes = b"weights") -> bool:
    return oracle.uniform(GLOBAL_OWNER + TAG_FAIL + tag) < delta


def sketched_weights(ds: Dataset, eps: float, delta: float, oracle: RandomOracle) -> WeightVector:
    """Exact weights scaled by a keyed factor in [1, 1+eps], clamped at 1."""
    if not (0.0 <= eps < 1.0):
        raise InputError(f"sketch accuracy must be in [0, 1), got {eps}")
    true = _true_weights(ds)
    if eps == 0:
        return WeightVector(true, sandwich=1.0)
    w = np.minimum(true * (1.0 + eps * _multipliers(ds, oracle)), 1.0)
    return WeightVector(w, sandwich=1.0 + eps, failed=sketch_failed(oracle, delta))


def dynamic_weight_oracle(ds: Dataset, D: float, oracle: RandomOracle) -> WeightVector:
    """w(x) in [true, D * true]; the caller divides by 2D."""
    if D < 1:
        raise InputError(f"D must be >= 1, got {D}")
    true = _true_weights(ds)
    if D == 1:
        return WeightVector(true, sandwich=1.0)
    return WeightVector(true * (1.0 + (D - 1.0) * _multipliers(ds, oracle)), sandwich=float(D))


def compatible_transform(wv: WeightVector, lam: float | None = None) -> WeightVector:
    """Halve the weights; the result is 4D-compatible for a D-sandwich.

    With D <= 2 this is the usual lambda = 8.  Callers with their own
    guarantee (the insertion-only final weights use 60) pass ``lam``.
    """
    if lam is None:
        lam = 8.0 if wv.sandwich <= 2.0 else 4.0 * wv.sandwich
    return replace(wv, w=wv.w / 2.0, lam=float(lam))


def compatibility_ratio(ds: Dataset, w) -> float:
    """max over (i, j) of d(x_i, x_j) / (w_j * sum_k d(x_i, x_k))."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    D = pairwise(ds)
    deg = D.sum(axis=1)
    worst = 0.0
    for i in range(ds.n):
        row = D[i]
        pos = row > 0
        if not pos.any():
            continue
        if np.any(w[pos] <= 0) or deg[i] <= 0:
            return float("inf")
        worst = max(worst, float(np.max(row[pos] / (w[pos] * deg[i]))))
    return worst


def check_compatibility(ds: Dataset, w, lam: float) -> tuple[bool, float]:
    r = compatibility_ratio(ds, w)
    return r <= lam, r
