"""Numba kernels for 64-bit modular arithmetic over RNS residue arrays.

Every kernel works on 2-D arrays of shape (rows, N) where ``rows[r]`` lives
modulo ``qs[pidx[r]]``; ``pidx`` maps a row to its prime so a single call can
process several primes (or several polynomials) at once.  All moduli must be
odd and below 2**62.
"""

import numba as nb
import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)


@nb.njit(cache=True, inline="always")
def _mulhi(a, b):
    al = a & _M32
    ah = a >> _S32
    bl = b & _M32
    bh = b >> _S32
    ll = al * bl
    hl = ah * bl
    lh = al * bh
    hh = ah * bh
    cross = (ll >> _S32) + (hl & _M32) + lh
    return hh + (hl >> _S32) + (cross >> _S32)


@nb.njit(cache=True, inline="always")
def _shoup(a, w, wp, q):
    # a * w mod q with wp = floor(w * 2**64 / q)
    r = a * w - _mulhi(a, wp) * q
    if r >= q:
        r -= q
    return r


@nb.njit(cache=True, inline="always")
def _montmul(a, b, q, qinv):
    lo = a * b
    hi = _mulhi(a, b)
    m = lo * qinv
    r = hi + _mulhi(m, q)
    if lo != _ZERO:
        r += _ONE
    if r >= q:
        r -= q
    return r


@nb.njit(cache=True)
def ntt_forward(a, pidx, qs, tw, twp):
    """In-place negacyclic NTT (Cooley-Tukey, bit-reversed output)."""
    rows, n = a.shape
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        t = n
        m = 1
        while m < n:
            t //= 2
            for i in range(m):
                j1 = 2 * i * t
                w = tw[p, m + i]
                wp = twp[p, m + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = _shoup(a[r, j + t], w, wp, q)
                    s = u + v
                    if s >= q:
                        s -= q
                    d = u + q - v
                    if d >= q:
                        d -= q
                    a[r, j] = s
                    a[r, j + t] = d
            m *= 2


@nb.njit(cache=True)
def ntt_inverse(a, pidx, qs, itw, itwp, ninv, ninvp):
    """In-place inverse of :func:`ntt_forward` (Gentleman-Sande)."""
    rows, n = a.shape
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        t = 1
        m = n
        while m > 1:
            h = m // 2
            j1 = 0
            for i in range(h):
                w = itw[p, h + i]
                wp = itwp[p, h + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = a[r, j + t]
                    s = u + v
                    if s >= q:
                        s -= q
                    d = u + q - v
                    if d >= q:
                        d -= q
                    a[r, j] = s
                    a[r, j + t] = _shoup(d, w, wp, q)
                j1 += 2 * t
            t *= 2
            m = h
        c = ninv[p]
        cp = ninvp[p]
        for j in range(n):
            a[r, j] = _shoup(a[r, j], c, cp, q)


@nb.njit(cache=True)
def mul_mod(a, b, pidx, qs, qinv, r2):
    """Pointwise product of two residue arrays."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        qi = qinv[p]
        rr = r2[p]
        for j in range(n):
            out[r, j] = _montmul(_montmul(a[r, j], b[r, j], q, qi), rr, q, qi)
    return out


@nb.njit(cache=True)
def mul_const(a, c, cp, pidx, qs):
    """Multiply row r by the per-row constant c[r] (Shoup form cp[r])."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        q = qs[pidx[r]]
        w = c[r]
        wp = cp[r]
        for j in range(n):
            out[r, j] = _shoup(a[r, j], w, wp, q)
    return out


@nb.njit(cache=True)
def dot_const(cts, c, cp, pidx, qs):
    """out[k] = sum_j cts[j] * c[j, k] with per-row constants.

    cts has shape (J, rows, N); c, cp have shape (J, K, rows).
    """
    J, rows, n = cts.shape
    K = c.shape[1]
    out = np.zeros((K, rows, n), dtype=np.uint64)
    for k in range(K):
        for r in range(rows):
            q = qs[pidx[r]]
            for jj in range(J):
                w = c[jj, k, r]
                if w == _ZERO:
                    continue
                wp = cp[jj, k, r]
                for j in range(n):
                    s = out[k, r, j] + _shoup(cts[jj, r, j], w, wp, q)
                    if s >= q:
                        s -= q
                    out[k, r, j] = s
    return out


@nb.njit(cache=True)
def mac_digits(digits, keys, pidx, qs, qinv, r2):
    """sum_i digits[i] * keys[i] for digit arrays of shape (D, rows, N)."""
    D, rows, n = digits.shape
    out = np.zeros((rows, n), dtype=np.uint64)
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        qi = qinv[p]
        rr = r2[p]
        for i in range(D):
            for j in range(n):
                v = _montmul(_montmul(digits[i, r, j], keys[i, r, j], q, qi), rr, q, qi)
                s = out[r, j] + v
                if s >= q:
                    s -= q
                out[r, j] = s
    return out
