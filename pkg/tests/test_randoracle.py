import hashlib
import math
import os

import numpy as np
import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from hypothesis import given, settings
from hypothesis import strategies as st

from geocut.core import InputError
from geocut.randoracle import (
    RandomOracle,
    TimelineParams,
    activation_time,
    active_kept,
    first_activation,
    key_from_env,
    mask_bit,
    not_activated_probability,
    owner_of,
    parse_key,
    timeline_bit,
    timeline_bits,
    timeline_uniforms,
)

ZERO_KEY = "00" * 16


def ctr_words(key: bytes, address: bytes, count: int) -> list[int]:
    # independent route: AES-CTR from a zero counter yields the same keystream as ECB over counter blocks
    sub = hashlib.blake2b(address, key=key, digest_size=16).digest()
    enc = Cipher(algorithms.AES(sub), modes.CTR(b"\x00" * 16)).encryptor()
    raw = enc.update(b"\x00" * (8 * count))
    return [int.from_bytes(raw[8 * i:8 * i + 8], "little") for i in range(count)]


def test_frozen_values():
    o = RandomOracle(ZERO_KEY)
    assert o.words(b"abc", 0, 3).tolist() == [8661198003180606121, 9769991951451305706, 12059440498962992781]
    assert o.uniform(b"abc") == 0.46952448456877627
    assert o.uniform(b"abc", 5) == 0.0020997680331313884


def test_words_match_ctr_keystream():
    o = RandomOracle(ZERO_KEY)
    ref = ctr_words(bytes(16), b"abc", 9)
    assert o.words(b"abc", 0, 9).tolist() == ref
    # odd offsets pick the right half of a block
    assert o.words(b"abc", 3, 5).tolist() == ref[3:8]
    assert o.uniform(b"abc", 5) == (ref[5] >> 11) * 2.0 ** -53


def test_determinism_and_key_separation():
    a, b = RandomOracle("ab" * 16), RandomOracle("ab" * 16)
    assert np.array_equal(a.uniforms(b"x", 0, 50), b.uniforms(b"x", 0, 50))
    assert not np.array_equal(a.uniforms(b"x", 0, 50), RandomOracle("ac" * 16).uniforms(b"x", 0, 50))
    assert not np.array_equal(a.uniforms(b"x", 0, 50), a.uniforms(b"y", 0, 50))


def test_uniform_independent_of_query_order():
    o1, o2 = RandomOracle("11" * 16), RandomOracle("11" * 16)
    first = [o1.uniform(b"p", i) for i in range(20)]
    second = [o2.uniform(b"p", i) for i in reversed(range(20))][::-1]
    assert first == second
    assert np.array_equal(o1.series(b"p", 20), np.array(first))


def test_bit_precision():
    o = RandomOracle(ZERO_KEY, bit_precision=8)
    u = o.uniforms(b"abc", 0, 100)
    assert np.all(u * 256 == np.floor(u * 256))
    with pytest.raises(InputError):
        RandomOracle(ZERO_KEY, bit_precision=0)


def test_key_parsing(monkeypatch):
    assert parse_key("0x" + "ff" * 16) == b"\xff" * 16
    assert len(parse_key("abcd")) == 16
    assert parse_key("abcd") == parse_key("ABCD")
    with pytest.raises(InputError):
        parse_key("not-hex")
    monkeypatch.setenv("GEOCUT_SEED", "ee" * 16)
    assert key_from_env("dd" * 16) == b"\xee" * 16
    monkeypatch.delenv("GEOCUT_SEED")
    assert key_from_env("dd" * 16) == b"\xdd" * 16
    assert len(key_from_env(None)) == 16


def test_uniform_moments():
    u = RandomOracle("22" * 16).uniforms(b"m", 0, 200_000)
    assert abs(u.mean() - 0.5) < 4 * math.sqrt(1 / 12 / u.size)
    counts, _ = np.histogram(u, bins=10, range=(0, 1))
    expected = u.size / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 30  # 9 dof, p ~ 4e-4


def test_timeline_matches_definition():
    o = RandomOracle("33" * 16)
    x = (1.0, 2.0)
    u = timeline_uniforms(o, owner_of(x), 40).tolist()
    for w in (0.5, 0.2, 0.05):
        active = False
        for t in range(1, 41):
            thr = w if active else min(w, 1 / t)
            bit = int(u[t - 1] <= thr)
            active = active or bool(bit)
            assert timeline_bit(o, x, w, t) == bit


def test_first_activation_examples():
    u = np.array([0.9, 0.6, 0.3, 0.1, 0.45])
    # t=1: 0.9 > 0.5; t=2: 0.6 > 0.5; t=3: 0.3 <= 1/3
    assert first_activation(u, 0.5) == 3
    assert timeline_bits(u, 0.5).tolist() == [False, False, True, True, True]
    assert first_activation(u, 0.05) is None
    assert first_activation(np.array([0.5]), 0.5) == 1


def test_timeline_weight_range():
    o = RandomOracle(ZERO_KEY)
    with pytest.raises(InputError):
        timeline_bit(o, (1.0,), 0.6, 3)
    with pytest.raises(InputError):
        activation_time(o, (1.0,), 0.0, 3)


def test_mask_bit_rate():
    tp = TimelineParams(t0=5, t_e=100, gamma=20.0)
    o = RandomOracle("44" * 16)
    assert all(mask_bit(o, (float(i),), tp, 5) == 1 for i in range(50))
    hits = sum(mask_bit(o, (float(i),), tp, 80) for i in range(4000))
    p = 20 / 80
    assert abs(hits / 4000 - p) < 3 * math.sqrt(p * (1 - p) / 4000)
    with pytest.raises(InputError):
        mask_bit(o, (1.0,), tp, 101)


def test_timeline_params_validation():
    with pytest.raises(InputError):
        TimelineParams(t0=10, t_e=5, gamma=2.0)
    with pytest.raises(InputError):
        TimelineParams(t0=1, t_e=5, gamma=0.5)
    tp = TimelineParams(t0=3, t_e=10, gamma=4.0)
    assert tp.keep_rate(3) == 1.0 and tp.keep_rate(8) == 0.5 and tp.keep_rate(4) == 1.0


def test_not_activated_closed_form():
    assert not_activated_probability(0.5, 100) == pytest.approx(0.005, rel=1e-12)
    assert not_activated_probability(0.5, 64) == pytest.approx(0.0078125, rel=1e-12)
    for te in (2, 7, 33):
        assert not_activated_probability(0.5, te) == pytest.approx(1 / (2 * te))


def test_not_activated_empirical():
    o = RandomOracle("55" * 16)
    w, te, trials = 0.1, 30, 6000
    never = sum(activation_time(o, (float(i),), w, te) is None for i in range(trials))
    p = not_activated_probability(w, te)
    assert abs(never / trials - p) < 3 * math.sqrt(p * (1 - p) / trials)


def test_active_kept_subset():
    tp = TimelineParams(t0=4, t_e=60, gamma=8.0)
    o = RandomOracle("66" * 16)
    for i in range(30):
        own = owner_of((float(i),))
        t_act, kept = active_kept(o, own, 0.3, tp)
        bits = timeline_bits(timeline_uniforms(o, own, 60), 0.3)
        assert set(kept.tolist()) <= set((np.flatnonzero(bits) + 1).tolist())
        if t_act is not None and t_act <= tp.t0:
            assert t_act in kept.tolist()


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=0, max_size=12), st.integers(0, 1000), st.integers(1, 40))
def test_windows_agree(address, start, count):
    o = RandomOracle(ZERO_KEY)
    full = o.words(address, 0, start + count)
    assert np.array_equal(o.words(address, start, count), full[start:])
