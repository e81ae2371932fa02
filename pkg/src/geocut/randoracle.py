"""Keyed random oracle plus activation timelines and masks derived from it.

Every random quantity in the library is addressed by ``owner || tag`` and an
integer index, so any backend can regenerate a point's randomness from the
point alone.  The oracle is AES-128 in counter mode under a per-address key
derived with BLAKE2b from the master key.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .core import InputError, encode_point

GLOBAL_OWNER = struct.pack("<I", 0xFFFFFFFF) + b"global"

# stream tags
TAG_TIMELINE = b"A"
TAG_MASK = b"K"
TAG_CHECK = b"C"
TAG_WEIGHT = b"W"
TAG_FAIL = b"F"

_FLOAT_BITS = 53  # a float64 mantissa holds at most this many random bits


def parse_key(key) -> bytes:
    if key is None:
        return secrets.token_bytes(16)
    if isinstance(key, bytes):
        raw = key
    else:
        s = str(key).strip().lower()
        if s.startswith("0x"):
            s = s[2:]
        try:
            raw = bytes.fromhex(s)
        except ValueError as exc:
            raise InputError(f"seed must be hex, got {key!r}") from exc
    if len(raw) < 16:
        # short hex seeds are convenient in tests; stretch them deterministically
        raw = hashlib.blake2b(raw, digest_size=16, person=b"geocut-seed").digest()
    return raw


def key_from_env(flag_value=None) -> bytes:
    """GEOCUT_SEED beats the command-line flag; neither gives fresh entropy."""
    env = os.environ.get("GEOCUT_SEED")
    return parse_key(env if env else flag_value)


class RandomOracle:
    def __init__(self, key=None, bit_precision: int = 64, cache_size: int = 4096):
        if bit_precision < 1 or bit_precision > 64:
            raise InputError("bit_precision must be in [1, 64]")
        self.key = parse_key(key)
        # BLAKE2b accepts keys of at most 64 bytes
        self._mac_key = self.key if len(self.key) <= 64 else hashlib.blake2b(self.key).digest()
        self.bit_precision = bit_precision
        self._bits = min(bit_precision, _FLOAT_BITS)
        self._keys: dict[bytes, bytes] = {}
        self._series: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    @property
    def key_hex(self) -> str:
        return self.key.hex()

    def _stream_key(self, address: bytes) -> bytes:
        k = self._keys.get(address)
        if k is None:
            k = hashlib.blake2b(address, key=self._mac_key, digest_size=16).digest()
            self._keys[address] = k
        return k

    def words(self, address: bytes, start: int, count: int) -> np.ndarray:
        """64-bit words ``start .. start+count-1`` of the address stream."""
        if count <= 0:
            return np.zeros(0, dtype=np.uint64)
        first, last = start // 2, (start + count - 1) // 2
        ctr = np.arange(first, last + 1, dtype=np.uint64)
        blocks = np.zeros((ctr.size, 2), dtype=">u8")
        blocks[:, 1] = ctr
        enc = Cipher(algorithms.AES(self._stream_key(address)), modes.ECB()).encryptor()
        raw = enc.update(blocks.tobytes()) + enc.finalize()
        w = np.frombuffer(raw, dtype="<u8")
        off = start - 2 * first
        return w[off:off + count]

    def _to_unit(self, w: np.ndarray) -> np.ndarray:
        b = self._bits
        return (w >> np.uint64(64 - b)).astype(np.float64) * (2.0 ** -b)

    def uniforms(self, address: bytes, start: int, count: int) -> np.ndarray:
        return self._to_unit(self.words(address, start, count))

    def uniform(self, address: bytes, index: int = 0) -> float:
        return float(self.uniforms(address, index, 1)[0])

    def series(self, address: bytes, length: int) -> np.ndarray:
        """Variates 0 .. length-1 of a stream, memoized (read-only array)."""
        key = (address, length)
        arr = self._series.get(key)
        if arr is not None:
            self._series.move_to_end(key)
            return arr
        arr = self.uniforms(address, 0, length)
        arr.setflags(write=False)
        self._series[key] = arr
        if len(self._series) > self._cache_size:
            self._series.popitem(last=False)
        return arr


def uniform_variate(oracle: RandomOracle, address: bytes, index: int = 0) -> float:
    return oracle.uniform(address, index)


def owner_of(x: Sequence[float], dup: int = 0) -> bytes:
    return encode_point(x, dup)


@dataclass(frozen=True)
class TimelineParams:
    t0: int
    t_e: int
    gamma: float

    def __post_init__(self):
        if self.t0 < 1 or self.t_e < 1:
            raise InputError("t0 and t_e must be positive")
        if self.t0 > self.t_e:
            raise InputError(f"t0={self.t0} exceeds t_e={self.t_e}")
        if self.gamma < 1:
            raise InputError("gamma must be >= 1")

    def keep_rate(self, t) -> np.ndarray | float:
        """gamma^t: 1 up to t0, then min(gamma/t, 1)."""
        t_arr = np.asarray(t, dtype=np.float64)
        out = np.where(t_arr <= self.t0, 1.0, np.minimum(self.gamma / np.maximum(t_arr, 1.0), 1.0))
        return float(out) if out.ndim == 0 else out


def _check_weight(w: float) -> None:
    if not (0.0 < w <= 0.5):
        raise InputError(f"timeline weight must be in (0, 1/2], got {w}")


def timeline_uniforms(oracle: RandomOracle, owner: bytes, t_e: int) -> np.ndarray:
    """U_1 .. U_{t_e} for the owner's timeline (array position t-1)."""
    return oracle.series(owner + TAG_TIMELINE, t_e)


def mask_uniforms(oracle: RandomOracle, owner: bytes, t_e: int) -> np.ndarray:
    return oracle.series(owner + TAG_MASK, t_e)


_T_CACHE: dict[int, np.ndarray] = {}


def _times(t_e: int) -> np.ndarray:
    t = _T_CACHE.get(t_e)
    if t is None:
        t = np.arange(1, t_e + 1, dtype=np.float64)
        t.setflags(write=False)
        _T_CACHE[t_e] = t
    return t


def first_activation(u: np.ndarray, w: float) -> int | None:
    """Smallest t with U_t <= min(w, 1/t), or None (not activated)."""
    t = _times(u.size)
    hits = np.flatnonzero(u <= np.minimum(w, 1.0 / t))
    return int(hits[0]) + 1 if hits.size else None


def timeline_bits(u: np.ndarray, w: float) -> np.ndarray:
    """The whole realized timeline A_1..A_{t_e} as a boolean array."""
    t_act = first_activation(u, w)
    bits = np.zeros(u.size, dtype=bool)
    if t_act is not None:
        bits[t_act - 1] = True
        bits[t_act:] = u[t_act:] <= w
    return bits


def mask_bits(u: np.ndarray, params: TimelineParams) -> np.ndarray:
    return u <= params.keep_rate(_times(u.size))


def timeline_bit(oracle: RandomOracle, x: Sequence[float], w: float, t: int, dup: int = 0) -> int:
    _check_weight(w)
    if t < 1:
        raise InputError("t must be >= 1")
    u = timeline_uniforms(oracle, owner_of(x, dup), t)
    return int(timeline_bits(u, w)[t - 1])


def mask_bit(oracle: RandomOracle, owner: bytes | Sequence[float], params: TimelineParams, t: int) -> int:
    if not (1 <= t <= params.t_e):
        raise InputError(f"t={t} outside [1, {params.t_e}]")
    if not isinstance(owner, bytes):
        owner = owner_of(owner)
    u = oracle.uniform(owner + TAG_MASK, t - 1)
    return int(u <= params.keep_rate(t))


def activation_time(oracle: RandomOracle, x: Sequence[float], w: float, t_e: int, dup: int = 0) -> int | None:
    _check_weight(w)
    return first_activation(timeline_uniforms(oracle, owner_of(x, dup), t_e), w)


def active_kept(oracle: RandomOracle, owner: bytes, w: float, params: TimelineParams) -> tuple[int | None, np.ndarray]:
    """Activation time and every time with A_t * K_t = 1 (1-based)."""
    u = timeline_uniforms(oracle, owner, params.t_e)
    a = timeline_bits(u, w)
    k = mask_bits(mask_uniforms(oracle, owner, params.t_e), params)
    t_act = int(np.argmax(a)) + 1 if a.any() else None
    return t_act, np.flatnonzero(a & k) + 1


def not_activated_probability(w: float, t_e: int) -> float:
    """Exact P[no activation by t_e] = prod_t (1 - min(w, 1/t))."""
    t = np.arange(1, t_e + 1, dtype=np.float64)
    return float(np.prod(1.0 - np.minimum(w, 1.0 / t)))
