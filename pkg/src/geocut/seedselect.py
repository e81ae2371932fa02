"""Seed selection by importance-sampled estimates of f.

Each candidate seed fixes the sides of the check-set points through Assign;
the seed with the smallest estimate wins, ties going to the smallest seed in
integer order.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import InputError, distances_from
from .randoracle import GLOBAL_OWNER, TAG_CHECK, RandomOracle, owner_of

SEED_CAP = 24
FALLBACK_CANDIDATES = 4096
XI_CONSTANT = 4.0
_BLOCK = 4096


def xi_value(m: int, n: float, eps: float, lam: float, delta: float | None = None,
             const: float = XI_CONSTANT, cap: int = SEED_CAP) -> float:
    """Check-set oversampling factor const * lam^3 * (m + ln(n/delta))^3 / eps^2."""
    delta = eps if delta is None else delta
    return const * lam ** 3 * (min(m, cap) + math.log(n / delta)) ** 3 / eps ** 2


def inclusion_uniform(oracle: RandomOracle, key, index: int = 0) -> float:
    return oracle.uniform(owner_of(key[0], key[1]) + TAG_CHECK, index)


def draw_check_set(keys: Sequence, w, xi: float, oracle: RandomOracle) -> list[int]:
    """Indices i included independently with probability min(xi * w_i, 1)."""
    w = np.asarray(w, dtype=np.float64)
    probs = np.minimum(xi * w, 1.0)
    return [i for i, k in enumerate(keys) if inclusion_uniform(oracle, k) < probs[i]]


def _importance_matrix(points: np.ndarray, probs: np.ndarray, p: float) -> np.ndarray:
    D = np.stack([distances_from(points[i], points, p) for i in range(len(points))]) if len(points) else np.zeros((0, 0))
    return D / np.outer(probs, probs)


def _estimates(M: np.ndarray, bits: np.ndarray) -> np.ndarray:
    S, c = bits.shape
    if c == 0:
        return np.zeros(S)
    out = np.empty(S)
    step = max(1, (1 << 21) // (c * c))
    for a in range(0, S, step):
        b = bits[a:a + step]
        same = b[:, :, None] == b[:, None, :]
        out[a:a + step] = 0.5 * (same * M).reshape(b.shape[0], -1).sum(axis=1)
    return out


def estimate_f(points, sides, probs, p: float) -> float | np.ndarray:
    """sum_{i,j} d_ij / (prob_i prob_j) * same_side_ij / 2 over the check set.

    ``sides`` is a 0/1 vector (one cut) or a matrix with one row per cut.
    """
    pts = np.asarray(points, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    sides = np.asarray(sides, dtype=np.uint8)
    single = sides.ndim == 1
    bits = sides[None, :] if single else sides
    if pts.shape[0] == 0:
        est = np.zeros(bits.shape[0])
    else:
        est = _estimates(_importance_matrix(pts, probs, p), bits)
    return float(est[0]) if single else est


def _fallback_seeds(oracle: RandomOracle, m: int, count: int) -> np.ndarray:
    u = oracle.uniforms(GLOBAL_OWNER + b"S", 0, count * m).reshape(count, m)
    cands = (u < 0.5).astype(np.uint8)
    return np.vstack([np.zeros((1, m), dtype=np.uint8), cands])


def search_seeds(score, m: int, oracle: RandomOracle | None = None, cap: int = SEED_CAP,
                 fallback_candidates: int = FALLBACK_CANDIDATES):
    """Argmin of ``score(seed_rows)`` over the seed family.

    Up to ``cap`` bits the whole family is enumerated in integer order; past
    that, sigma = 0 and a keyed batch of random seeds are scored instead.
    """
    from .greedy import seed_bits_from_int

    info = {"seed_fallback": False, "seeds_scored": 0}
    best_val, best = math.inf, np.zeros(m, dtype=np.uint8)
    if m > cap:
        if oracle is None:
            raise InputError("seed fallback needs an oracle")
        rows = _fallback_seeds(oracle, m, fallback_candidates)
        info["seed_fallback"] = True
        blocks = [rows[a:a + _BLOCK] for a in range(0, rows.shape[0], _BLOCK)]
    else:
        total = 1 << m
        blocks = (seed_bits_from_int(range(a, min(a + _BLOCK, total)), m) for a in range(0, total, _BLOCK))
    for rows in blocks:
        est = score(rows)
        info["seeds_scored"] += rows.shape[0]
        k = int(np.argmin(est))
        if est[k] < best_val:
            best_val, best = float(est[k]), rows[k].copy()
    info["estimate"] = best_val
    return best, info


def select_seed(engine, check: Sequence, probs, m: int, p: float, oracle: RandomOracle | None = None,
                cap: int = SEED_CAP, fallback_candidates: int = FALLBACK_CANDIDATES):
    """Return (sigma bits, info) minimizing the check-set estimate.

    ``check`` holds (key, activation time) for every check-set point.
    """
    # canonical order, so every backend feeds identical arrays to the estimator
    order = sorted(range(len(check)), key=lambda i: check[i][0])
    check = [check[i] for i in order]
    probs = np.asarray(probs, dtype=np.float64)[order] if len(order) else np.zeros(0)
    M = None
    if check:
        pts = np.array([k[0] for k, _ in check], dtype=np.float64)
        M = _importance_matrix(pts, probs, p)

    def score(rows):
        if M is None:
            return np.zeros(rows.shape[0])
        return _estimates(M, engine.bits(list(check), rows))

    return search_seeds(score, m, oracle, cap, fallback_candidates)


def pair_estimates(contrib: np.ndarray, bits1: np.ndarray, bits2: np.ndarray) -> np.ndarray:
    """Vectorized pair estimator: contrib[h] = d / (p1 * p2) per successful pair."""
    H = contrib.size
    if H == 0:
        raise InputError("no successful sample pairs")
    same = (bits1 == bits2).astype(np.float64)
    return (same * contrib).sum(axis=1) / (2 * H)


def pair_estimator(pairs: Sequence, sides: dict, p: float) -> float:
    """1/(2H) * sum_h d(y1, y2) / (p1 * p2) * same_side(y1, y2).

    ``pairs`` holds ((key1, p1), (key2, p2)); pairs with a missing draw
    (``None`` key) are skipped.  ``sides`` maps keys to 0/1.
    """
    good = [(a, b) for a, b in pairs if a[0] is not None and b[0] is not None]
    if not good:
        raise InputError("no successful sample pairs")
    total = 0.0
    for (k1, p1), (k2, p2) in good:
        if sides[k1] == sides[k2]:
            d = float(distances_from(np.asarray(k1[0]), np.asarray([k2[0]]), p)[0])
            total += d / (p1 * p2)
    return total / (2 * len(good))
