from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memtangle import _backend
from memtangle.rng import Pcg32, fnv1a64, splitmix64


def test_pcg32_reference_sequence():
    # pcg32_srandom_r(42, 54) from the reference C implementation
    g = Pcg32(42, 54)
    got = [g.next_u32() for _ in range(6)]
    assert got == [0xA15C02B7, 0x7B47F409, 0xBA1D3330, 0x83D2F293, 0xBFA4784B, 0xCBED606E]


def test_bulk_fill_matches_scalar_steps():
    a = Pcg32(42, 54)
    b = Pcg32(42, 54)
    bulk = a.u32(1000)
    assert bulk.tolist() == [b.next_u32() for _ in range(1000)]
    assert a.state == b.state


def test_splitmix64_and_fnv_reference_values():
    assert splitmix64(0)[0] == 0xE220A8397B1DCDAF
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_streams_differ_by_purpose_and_seed():
    a = Pcg32.stream(1, "split").u32(8)
    b = Pcg32.stream(1, "noise").u32(8)
    c = Pcg32.stream(2, "split").u32(8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(a, Pcg32.stream(1, "split").u32(8))


def test_seed_range_checked():
    with pytest.raises(ValueError):
        Pcg32.stream(-1, "split")
    with pytest.raises(ValueError):
        Pcg32.stream(2**64, "split")


def test_uniform_open_interval_and_normal_moments():
    g = Pcg32.stream(3, "noise")
    u = g.uniform(200_000)
    assert u.min() > 0.0 and u.max() < 1.0
    z = Pcg32.stream(3, "noise").normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01


def test_normal_odd_count_consumes_whole_pair():
    a = Pcg32.stream(9, "noise")
    b = Pcg32.stream(9, "noise")
    first = a.normal(3)
    second = b.normal(4)
    assert np.array_equal(first, second[:3])
    assert a.state == b.state


def test_box_muller_by_hand():
    g = Pcg32.stream(4, "noise")
    u = Pcg32.stream(4, "noise").uniform(2)
    z = g.normal(2)
    r = np.sqrt(-2.0 * np.log(u[0]))
    assert z[0] == pytest.approx(r * np.cos(2 * np.pi * u[1]), abs=1e-15)
    assert z[1] == pytest.approx(r * np.sin(2 * np.pi * u[1]), abs=1e-15)


def test_bounded_range():
    g = Pcg32.stream(5, "x")
    draws = [g.bounded(7) for _ in range(2000)]
    assert set(draws) == set(range(7))
    with pytest.raises(ValueError):
        g.bounded(0)


def test_shuffle_requires_int64():
    with pytest.raises(TypeError):
        Pcg32.stream(0, "x").shuffle(np.arange(4, dtype=np.int32))


def test_shuffle_matches_scalar_fisher_yates():
    arr = Pcg32.stream(11, "split").permutation(50)
    g = Pcg32.stream(11, "split")
    ref = list(range(50))
    for i in range(49, 0, -1):
        j = g.bounded(i + 1)
        ref[i], ref[j] = ref[j], ref[i]
    assert arr.tolist() == ref


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 300))
def test_permutation_is_a_permutation(seed, n):
    p = Pcg32.stream(seed, "split").permutation(n)
    assert sorted(p.tolist()) == list(range(n))


@pytest.mark.skipif(_backend.compiled() is None, reason="compiled kernels not built")
class TestBackendsAgree:
    def test_fill_bitwise(self):
        fast = Pcg32.stream(7, "noise", backend=_backend.compiled())
        slow = Pcg32.stream(7, "noise", backend=_backend.fallback)
        for n in (0, 1, 5, 65536, 65537, 200_001):
            assert np.array_equal(fast.u32(n), slow.u32(n))
            assert fast.state == slow.state

    def test_shuffle_bitwise(self):
        for n in (0, 1, 2, 1000, 12345):
            a = Pcg32.stream(n, "split", backend=_backend.compiled()).permutation(n)
            b = Pcg32.stream(n, "split", backend=_backend.fallback).permutation(n)
            assert np.array_equal(a, b)

    def test_trialwise_rows(self):
        rng = np.random.default_rng(0)
        for n, k in ((5, 0), (30, 3), (64, 10)):
            a = rng.random((n, n))
            b = rng.random((n, n))
            a[2] = 0.5  # a constant row once its self-cells are dropped
            out1 = np.empty(n - k)
            out2 = np.empty(n - k)
            bad1 = _backend.compiled().trialwise_rows(a, b, k, out1)
            bad2 = _backend.fallback.trialwise_rows(a, b, k, out2)
            assert bad1 == bad2
            np.testing.assert_allclose(out1, out2, rtol=0, atol=1e-12, equal_nan=True)
