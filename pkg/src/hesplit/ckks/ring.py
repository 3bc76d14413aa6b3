"""Prime selection and per-ring precomputation for the RNS representation."""

from __future__ import annotations

import functools
import random

import numpy as np

from . import _kernels as K

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
MAX_PRIME_BITS = 61


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(bits: int, n: int, count: int, exclude=()) -> list[int]:
    """Largest `count` primes p < 2**bits with p = 1 mod 2n, skipping `exclude`.

    Raises ValueError if the bit range holds fewer than `count` such primes.
    """
    step = 2 * n
    lo = 1 << (bits - 1)
    p = ((1 << bits) - 1) // step * step + 1
    out: list[int] = []
    while len(out) < count:
        if p < lo:
            raise ValueError(f"not enough {bits}-bit primes = 1 mod {step}")
        if p not in exclude and is_prime(p):
            out.append(p)
        p -= step
    return out


def chain_primes(bits: tuple[int, ...], n: int) -> list[int]:
    """One distinct NTT-friendly prime per entry of `bits`, in chain order."""
    used: set[int] = set()
    primes = []
    for b in bits:
        (p,) = ntt_primes(b, n, 1, exclude=used)
        used.add(p)
        primes.append(p)
    return primes


def _bitrev(i: int, bits: int) -> int:
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


def _psi(q: int, n: int) -> int:
    # primitive 2n-th root of unity mod q
    rnd = random.Random(q)
    while True:
        x = rnd.randrange(2, q - 1)
        psi = pow(x, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi


def shoup(w: int, q: int) -> int:
    return (w << 64) // q


class Ring:
    """Precomputed tables for Z_q[X]/(X^N + 1) over a list of primes.

    The last prime is the key-switching special prime; the others form the
    ciphertext modulus chain.
    """

    def __init__(self, n: int, primes: list[int]):
        self.n = n
        self.logn = n.bit_length() - 1
        self.primes = list(primes)
        self.k = len(primes)
        self.special = self.k - 1
        self.qs = np.array(primes, dtype=np.uint64)
        self.qs_i64 = np.array(primes, dtype=np.int64)
        tw = np.empty((self.k, n), dtype=np.uint64)
        twp = np.empty_like(tw)
        itw = np.empty_like(tw)
        itwp = np.empty_like(tw)
        ninv = np.empty(self.k, dtype=np.uint64)
        ninvp = np.empty_like(ninv)
        qinv = np.empty_like(ninv)
        r2 = np.empty_like(ninv)
        rev = [_bitrev(i, self.logn) for i in range(n)]
        for r, q in enumerate(primes):
            psi = _psi(q, n)
            psi_inv = pow(psi, -1, q)
            fw = [pow(psi, e, q) for e in rev]
            iw = [pow(psi_inv, e, q) for e in rev]
            tw[r] = fw
            twp[r] = [shoup(w, q) for w in fw]
            itw[r] = iw
            itwp[r] = [shoup(w, q) for w in iw]
            ni = pow(n, -1, q)
            ninv[r] = ni
            ninvp[r] = shoup(ni, q)
            qinv[r] = (-pow(q, -1, 1 << 64)) % (1 << 64)
            r2[r] = pow(2, 128, q)
        self.tw, self.twp, self.itw, self.itwp = tw, twp, itw, itwp
        self.ninv, self.ninvp, self.qinv, self.r2 = ninv, ninvp, qinv, r2
        # evaluation point of NTT slot i is psi^(2*rev[i] + 1)
        self._exp = np.array([2 * e + 1 for e in rev], dtype=np.int64)
        self._pos = {int(e): i for i, e in enumerate(self._exp)}
        self._perm_cache: dict[int, np.ndarray] = {}

    # ---- transforms -------------------------------------------------
    def ntt(self, a: np.ndarray, pidx) -> np.ndarray:
        a = np.array(a, dtype=np.uint64, order="C", copy=True)
        shape = a.shape
        a = a.reshape(-1, self.n)
        K.ntt_forward(a, _rows(pidx, a.shape[0]), self.qs, self.tw, self.twp)
        return a.reshape(shape)

    def intt(self, a: np.ndarray, pidx) -> np.ndarray:
        a = np.array(a, dtype=np.uint64, order="C", copy=True)
        shape = a.shape
        a = a.reshape(-1, self.n)
        K.ntt_inverse(a, _rows(pidx, a.shape[0]), self.qs, self.itw, self.itwp,
                      self.ninv, self.ninvp)
        return a.reshape(shape)

    # ---- elementwise ------------------------------------------------
    def mul(self, a, b, pidx):
        shape = np.broadcast_shapes(a.shape, b.shape)
        a2 = np.ascontiguousarray(np.broadcast_to(a, shape)).reshape(-1, self.n)
        b2 = np.ascontiguousarray(np.broadcast_to(b, shape)).reshape(-1, self.n)
        out = K.mul_mod(a2, b2, _rows(pidx, a2.shape[0]), self.qs, self.qinv, self.r2)
        return out.reshape(shape)

    def add(self, a, b, pidx):
        q = self._col(pidx, a.ndim)
        s = a + b
        return np.minimum(s, s - q)

    def sub(self, a, b, pidx):
        q = self._col(pidx, a.ndim)
        d = a + (q - b)
        return np.minimum(d, d - q)

    def neg(self, a, pidx):
        q = self._col(pidx, a.ndim)
        return np.where(a == 0, a, q - a)

    def mul_int(self, a: np.ndarray, c: int, pidx) -> np.ndarray:
        """Multiply each prime's rows by the (possibly huge, signed) integer c."""
        pidx = list(pidx)
        cs = [c % self.primes[p] for p in pidx]
        cv = np.array(cs, dtype=np.uint64)
        cp = np.array([shoup(x, self.primes[p]) for x, p in zip(cs, pidx)], dtype=np.uint64)
        shape = a.shape
        a2 = np.ascontiguousarray(a).reshape(-1, len(pidx), self.n)
        reps = a2.shape[0]
        out = K.mul_const(a2.reshape(-1, self.n), np.tile(cv, reps), np.tile(cp, reps),
                          np.tile(np.asarray(pidx, dtype=np.int64), reps), self.qs)
        return out.reshape(shape)

    def _col(self, pidx, ndim):
        q = self.qs[np.asarray(list(pidx))]
        return q.reshape(-1, 1) if ndim > 1 else q

    # ---- lifting ----------------------------------------------------
    def from_signed(self, x: np.ndarray, pidx) -> np.ndarray:
        """Reduce signed int64 coefficient vector(s) into residues (rows, N)."""
        pidx = np.asarray(list(pidx))
        q = self.qs_i64[pidx].reshape(-1, 1)
        return np.mod(np.asarray(x, dtype=np.int64)[..., None, :], q).astype(np.uint64)

    def from_bigint(self, coeffs, pidx) -> np.ndarray:
        """Reduce arbitrary Python-int coefficients into residues."""
        obj = np.asarray(coeffs, dtype=object)
        return np.stack([(obj % self.primes[p]).astype(np.uint64) for p in pidx])

    def centered(self, r: np.ndarray, p: int) -> np.ndarray:
        """Residues mod primes[p] as signed int64 in (-q/2, q/2]."""
        q = self.primes[p]
        s = r.astype(np.int64)
        return np.where(r > np.uint64(q // 2), s - q, s)

    def crt_centered(self, res: np.ndarray, pidx) -> np.ndarray:
        """Centered CRT reconstruction of coefficient residues as Python ints."""
        pidx = list(pidx)
        if len(pidx) == 1:
            return self.centered(res[0], pidx[0]).astype(object)
        Q = 1
        for p in pidx:
            Q *= self.primes[p]
        acc = np.zeros(self.n, dtype=object)
        for row, p in zip(res, pidx):
            q = self.primes[p]
            qhat = Q // q
            y = self.mul_int(row[None, :], pow(qhat, -1, q), [p])[0]
            acc = acc + y.astype(object) * qhat
        acc = acc % Q
        return np.where(acc > Q // 2, acc - Q, acc)

    # ---- automorphisms ----------------------------------------------
    def galois_perm(self, g: int) -> np.ndarray:
        """Permutation of NTT slots implementing X -> X^g."""
        perm = self._perm_cache.get(g)
        if perm is None:
            two_n = 2 * self.n
            perm = np.array([self._pos[int(e * g % two_n)] for e in self._exp], dtype=np.int64)
            self._perm_cache[g] = perm
        return perm


def _rows(pidx, nrows: int) -> np.ndarray:
    p = np.asarray(list(pidx) if not isinstance(pidx, np.ndarray) else pidx, dtype=np.int64)
    if p.size == nrows:
        return p
    return np.tile(p, nrows // p.size)


@functools.lru_cache(maxsize=16)
def get_ring(n: int, primes: tuple[int, ...]) -> Ring:
    return Ring(n, list(primes))
