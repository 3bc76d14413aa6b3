import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hesplit.ckks.ring import chain_primes, get_ring, is_prime, ntt_primes
from helpers import negacyclic_mul


def test_is_prime_small_values():
    sieve = [n for n in range(2, 400) if all(n % d for d in range(2, int(n ** 0.5) + 1))]
    assert [n for n in range(400) if is_prime(n)] == sieve


@pytest.mark.parametrize("bits,n", [(20, 4096), (40, 8192), (60, 8192), (18, 2048)])
def test_ntt_primes_are_ntt_friendly_and_sized(bits, n):
    ps = ntt_primes(bits, n, 2)
    for p in ps:
        assert is_prime(p) and p % (2 * n) == 1 and p.bit_length() == bits
    # largest first, and nothing larger in range
    assert ps[0] > ps[1]
    assert not any(is_prime(q) for q in range(ps[0] + 2 * n, 1 << bits, 2 * n))


def test_chain_primes_distinct_for_repeated_sizes():
    ps = chain_primes((40, 21, 21, 40), 8192)
    assert len(set(ps)) == 4
    assert [p.bit_length() for p in ps] == [40, 21, 21, 40]


def test_not_enough_primes_raises():
    with pytest.raises(ValueError):
        ntt_primes(12, 4096, 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ntt_product_matches_schoolbook(seed):
    n = 32
    primes = tuple(ntt_primes(30, n, 2))
    ring = get_ring(n, primes)
    rng = np.random.default_rng(seed)
    a = np.stack([rng.integers(0, q, n, dtype=np.uint64) for q in primes])
    b = np.stack([rng.integers(0, q, n, dtype=np.uint64) for q in primes])
    prod = ring.intt(ring.mul(ring.ntt(a, [0, 1]), ring.ntt(b, [0, 1]), [0, 1]), [0, 1])
    for r, q in enumerate(primes):
        np.testing.assert_array_equal(prod[r], negacyclic_mul(a[r], b[r], q))


def test_ntt_roundtrip_large_ring():
    primes = tuple(ntt_primes(60, 8192, 1))
    ring = get_ring(8192, primes)
    a = np.random.default_rng(0).integers(0, primes[0], (1, 8192), dtype=np.uint64)
    np.testing.assert_array_equal(ring.intt(ring.ntt(a, [0]), [0]), a)


def test_crt_centered_recovers_signed_integers():
    primes = tuple(ntt_primes(30, 16, 3))
    ring = get_ring(16, primes)
    vals = [-(2 ** 80) + 7, -1, 0, 1, 2 ** 85] + [0] * 11
    res = ring.from_bigint(vals, [0, 1, 2])
    assert list(ring.crt_centered(res, [0, 1, 2])) == vals


def test_mul_int_by_huge_constant():
    primes = tuple(ntt_primes(40, 16, 2))
    ring = get_ring(16, primes)
    a = np.arange(32, dtype=np.uint64).reshape(2, 16)
    c = -(3 ** 50)
    got = ring.mul_int(a, c, [0, 1])
    for r, q in enumerate(primes):
        assert list(got[r]) == [int(x) * c % q for x in a[r]]
