"""Leveled CKKS over Z[X]/(X^N + 1) with an RNS/NTT backend.

Ciphertexts and plaintexts are kept in NTT (evaluation) form.  A ciphertext at
level ``l`` lives modulo the first ``l + 1`` chain primes; multiplying by a
plaintext and rescaling drops the last of them.  Key switching (rotations)
uses one extra special prime outside the chain.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field


import numpy as np

from .ring import MAX_PRIME_BITS, Ring, chain_primes, get_ring, ntt_primes

SIGMA = 3.2
ALLOWED_DEGREES = (2048, 4096, 8192, 16384, 32768)


class HEError(Exception):
    """Base class for homomorphic-encryption errors."""


class ParameterError(HEError):
    pass


class CapacityError(HEError):
    pass


class AlignmentError(HEError):
    pass


class DepthError(HEError):
    pass


class CapabilityError(HEError):
    pass


@dataclass(frozen=True)
class HEParams:
    poly_degree: int
    coeff_bits: tuple[int, ...]
    scale_bits: int

    def __post_init__(self):
        object.__setattr__(self, "coeff_bits", tuple(int(b) for b in self.coeff_bits))
        n = self.poly_degree
        if n not in ALLOWED_DEGREES:
            raise ParameterError(f"poly_degree must be one of {ALLOWED_DEGREES}, got {n}")
        if len(self.coeff_bits) < 1:
            raise ParameterError("coefficient modulus chain is empty")
        for b in self.coeff_bits:
            if not 2 <= b < MAX_PRIME_BITS:
                raise ParameterError(f"chain prime size {b} outside [2, {MAX_PRIME_BITS - 1}]")
        if self.scale_bits < 1 or self.scale_bits >= sum(self.coeff_bits):
            raise ParameterError("scale does not fit in the coefficient modulus")

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def slots(self) -> int:
        return self.poly_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.coeff_bits) - 1

    @property
    def is_weak(self) -> bool:
        """Below the 4096-degree floor the CLI refuses without an override."""
        return self.poly_degree < 4096

    def label(self) -> str:
        return f"{self.poly_degree}/[{','.join(map(str, self.coeff_bits))}]/2^{self.scale_bits}"

    @classmethod
    def parse(cls, text: str) -> "HEParams":
        """Parse ``8192/[60,40,40,60]/2^40`` (or ``8192:60,40,40,60:40``)."""
        t = text.replace(" ", "")
        if ":" in t:
            n, bits, sc = t.split(":")
        else:
            n, bits, sc = t.split("/")
        bits = bits.strip("[]")
        sc = sc.split("^")[-1]
        return cls(int(n), tuple(int(b) for b in bits.split(",")), int(sc))

    def ring(self) -> Ring:
        return _ring_for(self)


# parameter rows used in the experiments (ring degree, chain bit sizes, log2 scale)
STANDARD_PARAM_SETS = (
    HEParams(8192, (60, 40, 40, 60), 40),
    HEParams(8192, (40, 21, 21, 40), 21),
    HEParams(4096, (40, 20, 20), 21),
    HEParams(4096, (40, 20, 40), 20),
    HEParams(2048, (18, 18, 18), 16),
)


@functools.lru_cache(maxsize=32)
def _ring_for(params: HEParams) -> Ring:
    n = params.poly_degree
    try:
        chain = chain_primes(params.coeff_bits, n)
        (special,) = ntt_primes(MAX_PRIME_BITS, n, 1, exclude=set(chain))
    except ValueError as exc:
        raise ParameterError(str(exc)) from None
    return get_ring(n, tuple(chain + [special]))


# ---------------------------------------------------------------------------
# data types


@dataclass
class Plaintext:
    data: np.ndarray  # (level + 1, N) uint64, NTT form
    scale: float
    level: int
    params: HEParams


@dataclass
class Ciphertext:
    data: np.ndarray  # (2, level + 1, N) uint64, NTT form
    scale: float
    level: int
    params: HEParams

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.data.copy(), self.scale, self.level, self.params)


@dataclass
class GaloisKey:
    galois_elt: int
    data: np.ndarray  # (chain_len, 2, chain_len + 1, N): per digit, (b, a) over chain + special


@dataclass
class PublicContext:
    params: HEParams
    public_key: np.ndarray  # (2, chain_len, N): (b, a), NTT form
    galois_keys: dict[int, GaloisKey] = field(default_factory=dict)

    @property
    def rotations(self) -> list[int]:
        return sorted(self.galois_keys)


@dataclass
class PrivateContext:
    params: HEParams
    secret: np.ndarray  # (chain_len + 1, N) NTT form over chain + special
    public: PublicContext

    @property
    def public_key(self):
        return self.public.public_key

    @property
    def galois_keys(self):
        return self.public.galois_keys

    def to_public(self) -> PublicContext:
        return self.public


# ---------------------------------------------------------------------------
# sampling


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _gaussian(rng, n: int) -> np.ndarray:
    e = np.rint(rng.normal(0.0, SIGMA, n))
    return np.clip(e, -6 * SIGMA, 6 * SIGMA).astype(np.int64)


def _ternary(rng, n: int) -> np.ndarray:
    return rng.integers(-1, 2, n, dtype=np.int64)


def _uniform(rng, ring: Ring, pidx) -> np.ndarray:
    return np.stack([rng.integers(0, ring.primes[p], ring.n, dtype=np.uint64) for p in pidx])


def _small_ntt(ring: Ring, x: np.ndarray, pidx) -> np.ndarray:
    return ring.ntt(ring.from_signed(x, pidx), pidx)


# ---------------------------------------------------------------------------
# key generation


def default_rotations(params: HEParams) -> list[int]:
    """Signed power-of-two rotation steps covering every slot offset."""
    steps = []
    s = 1
    while s < params.slots:
        steps += [s, -s]
        s *= 2
    return steps


def galois_element(params: HEParams, step: int) -> int:
    n2 = 2 * params.poly_degree
    return pow(5, step % params.slots, n2)


def keygen(params: HEParams, rotations=None, rng=None) -> tuple[PrivateContext, PublicContext]:
    """Generate a secret key, public key and Galois keys for ``rotations``.

    ``rotations=None`` requests :func:`default_rotations`; an empty list yields
    contexts without Galois keys.
    """
    rng = _rng(rng)
    ring = params.ring()
    n = params.poly_degree
    chain = list(range(params.max_level + 1))
    full = chain + [ring.special]
    s_coef = _ternary(rng, n)
    s = _small_ntt(ring, s_coef, full)

    a = _uniform(rng, ring, chain)
    e = _small_ntt(ring, _gaussian(rng, n), chain)
    b = ring.sub(e, ring.mul(a, s[: len(chain)], chain), chain)
    pub = PublicContext(params, np.stack([b, a]))

    if rotations is None:
        rotations = default_rotations(params)
    for step in rotations:
        step = int(step)
        if step % params.slots == 0 or step in pub.galois_keys:
            continue
        g = galois_element(params, step)
        s_g = s[:, ring.galois_perm(g)]
        pub.galois_keys[step] = GaloisKey(g, _switch_key(ring, s_g, s, chain, rng))
    return PrivateContext(params, s, pub), pub


def _switch_key(ring: Ring, s_from, s_to, chain, rng) -> np.ndarray:
    """Key-switching key from s_from to s_to with one digit per chain prime."""
    full = list(chain) + [ring.special]
    n = ring.n
    P = ring.primes[ring.special]
    out = np.empty((len(chain), 2, len(full), n), dtype=np.uint64)
    for i in chain:
        a = _uniform(rng, ring, full)
        e = _small_ntt(ring, _gaussian(rng, n), full)
        b = ring.sub(e, ring.mul(a, s_to, full), full)
        # + P * s_from on the i-th prime only (gadget digit i)
        bump = ring.mul_int(s_from[i][None, :], P, [i])[0]
        b[i] = ring.add(b[i][None, :], bump[None, :], [i])[0]
        out[i, 0] = b
        out[i, 1] = a
    return out


# ---------------------------------------------------------------------------
# encoding


def _slot_index(n: int) -> np.ndarray:
    e = np.array([pow(5, j, 2 * n) for j in range(n // 2)], dtype=np.int64)
    return (e - 1) // 2, (2 * n - e - 1) // 2


_SLOT_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _embedding(n: int):
    c = _SLOT_CACHE.get(n)
    if c is None:
        pos, neg = _slot_index(n)
        zeta = np.exp(1j * np.pi * np.arange(n) / n)
        c = (pos, neg, zeta)
        _SLOT_CACHE[n] = c
    return c


def _values_to_coeffs(values, n: int) -> np.ndarray:
    """Inverse canonical embedding; a 2-D input encodes one vector per row."""
    v = np.asarray(values, dtype=np.complex128)
    v = v.reshape(1, -1) if v.ndim < 2 else v
    if v.shape[1] > n // 2:
        raise CapacityError(f"{v.shape[1]} values exceed {n // 2} slots")
    pos, neg, zeta = _embedding(n)
    full = np.zeros((v.shape[0], n), dtype=np.complex128)
    full[:, pos[: v.shape[1]]] = v
    full[:, neg[: v.shape[1]]] = np.conj(v)
    out = (np.fft.fft(full, axis=1) / n * np.conj(zeta)).real
    return out if np.ndim(values) == 2 else out[0]


def _coeffs_to_values(coeffs: np.ndarray, n: int) -> np.ndarray:
    pos, _, zeta = _embedding(n)
    full = np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * zeta) * n
    return full[pos]


def encode(params: HEParams, values, scale=None, level=None) -> Plaintext:
    """Encode up to N/2 real values into an NTT-form plaintext."""
    ring = params.ring()
    scale = params.scale if scale is None else float(scale)
    level = params.max_level if level is None else level
    pidx = list(range(level + 1))
    coeffs = np.rint(_values_to_coeffs(values, params.poly_degree) * scale)
    if not np.all(np.isfinite(coeffs)):
        raise CapacityError("encoded coefficients are not finite")
    if np.max(np.abs(coeffs), initial=0.0) < 2.0 ** 62:
        res = ring.from_signed(coeffs.astype(np.int64), pidx)
    else:
        res = ring.from_bigint([int(c) for c in coeffs], pidx)
    return Plaintext(ring.ntt(res, pidx), scale, level, params)


def encode_many(params: HEParams, rows, scale=None, level=None) -> np.ndarray:
    """Encode each row of a 2-D array; returns stacked NTT data (k, level + 1, N)."""
    ring = params.ring()
    scale = params.scale if scale is None else float(scale)
    level = params.max_level if level is None else level
    pidx = list(range(level + 1))
    coeffs = np.rint(_values_to_coeffs(np.atleast_2d(rows), params.poly_degree) * scale)
    if not np.all(np.isfinite(coeffs)) or np.max(np.abs(coeffs), initial=0.0) >= 2.0 ** 62:
        return np.stack([encode(params, r, scale, level).data for r in np.atleast_2d(rows)])
    return ring.ntt(ring.from_signed(coeffs.astype(np.int64), pidx), pidx)


def decode(pt: Plaintext) -> np.ndarray:
    """Real parts of all N/2 slots."""
    params = pt.params
    ring = params.ring()
    pidx = list(range(pt.level + 1))
    coef = ring.crt_centered(ring.intt(pt.data, pidx), pidx)
    as_float = np.array([float(c) for c in coef]) if coef.dtype == object else coef
    return _coeffs_to_values(as_float / pt.scale, params.poly_degree).real


def encode_constant(params: HEParams, value: float, scale: float, level: int) -> Plaintext:
    """Constant slot vector: a degree-0 polynomial (all NTT slots equal)."""
    ring = params.ring()
    pidx = list(range(level + 1))
    c = int(round(value * scale))
    data = np.stack([np.full(ring.n, c % ring.primes[p], dtype=np.uint64) for p in pidx])
    return Plaintext(data, float(scale), level, params)


# ---------------------------------------------------------------------------
# encryption


def encrypt(ctx, pt: Plaintext, rng=None) -> Ciphertext:
    """Encrypt under the public key; with a PrivateContext the secret key is used.

    Secret-key encryption is the lower-noise variant available to the key owner
    (the client); anyone holding only a PublicContext uses the public key.
    """
    if isinstance(ctx, PrivateContext):
        return encrypt_symmetric(ctx, pt, rng)
    rng = _rng(rng)
    params = ctx.params
    ring = params.ring()
    n = params.poly_degree
    pidx = list(range(pt.level + 1))
    b, a = ctx.public_key[0][pidx], ctx.public_key[1][pidx]
    u = _small_ntt(ring, _ternary(rng, n), pidx)
    e0 = _small_ntt(ring, _gaussian(rng, n), pidx)
    e1 = _small_ntt(ring, _gaussian(rng, n), pidx)
    c0 = ring.add(ring.add(ring.mul(b, u, pidx), e0, pidx), pt.data, pidx)
    c1 = ring.add(ring.mul(a, u, pidx), e1, pidx)
    return Ciphertext(np.stack([c0, c1]), pt.scale, pt.level, params)


def encrypt_symmetric(ctx: PrivateContext, pt: Plaintext, rng=None) -> Ciphertext:
    if not isinstance(ctx, PrivateContext):
        raise CapabilityError("secret-key encryption needs a private context")
    rng = _rng(rng)
    params = ctx.params
    ring = params.ring()
    pidx = list(range(pt.level + 1))
    a = _uniform(rng, ring, pidx)
    e = _small_ntt(ring, _gaussian(rng, params.poly_degree), pidx)
    c0 = ring.add(ring.sub(e, ring.mul(a, ctx.secret[pidx], pidx), pidx), pt.data, pidx)
    return Ciphertext(np.stack([c0, a]), pt.scale, pt.level, params)


def encrypt_many(ctx, rows, rng=None, scale=None, level=None) -> list[Ciphertext]:
    """Encode and encrypt each row of ``rows`` with one vectorized pass."""
    rng = _rng(rng)
    params = ctx.params
    ring = params.ring()
    n = params.poly_degree
    scale = params.scale if scale is None else float(scale)
    level = params.max_level if level is None else level
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k = rows.shape[0]
    if k == 0:
        return []
    pidx = list(range(level + 1))
    coeffs = np.rint(_values_to_coeffs(rows, n) * scale)
    small = np.all(np.isfinite(coeffs)) and np.max(np.abs(coeffs), initial=0.0) < 2.0 ** 61
    if isinstance(ctx, PrivateContext) and small:
        # message and error share one transform
        a = np.stack([_uniform(rng, ring, pidx) for _ in range(k)])
        e = np.stack([_gaussian(rng, n) for _ in range(k)])
        me = _small_ntt(ring, coeffs.astype(np.int64) + e, pidx)
        return [Ciphertext(np.stack([c, ai]), scale, level, params) for c, ai in
                zip(ring.sub(me, ring.mul(a, ctx.secret[pidx][None], pidx), pidx), a)]
    m = encode_many(params, rows, scale, level)
    if isinstance(ctx, PrivateContext):
        a = np.stack([_uniform(rng, ring, pidx) for _ in range(k)])
        e = _small_ntt(ring, np.stack([_gaussian(rng, n) for _ in range(k)]), pidx)
        c0 = ring.add(ring.sub(e, ring.mul(a, ctx.secret[pidx][None], pidx), pidx), m, pidx)
        c1 = a
    else:
        b, a = ctx.public_key[0][pidx][None], ctx.public_key[1][pidx][None]
        u = _small_ntt(ring, np.stack([_ternary(rng, n) for _ in range(k)]), pidx)
        e0 = _small_ntt(ring, np.stack([_gaussian(rng, n) for _ in range(k)]), pidx)
        e1 = _small_ntt(ring, np.stack([_gaussian(rng, n) for _ in range(k)]), pidx)
        c0 = ring.add(ring.add(ring.mul(b, u, pidx), e0, pidx), m, pidx)
        c1 = ring.add(ring.mul(a, u, pidx), e1, pidx)
    return [Ciphertext(np.stack([c0[i], c1[i]]), scale, level, params) for i in range(k)]


def decrypt(ctx, ct: Ciphertext) -> Plaintext:
    if not isinstance(ctx, PrivateContext):
        raise CapabilityError("decryption requires the secret key (private context)")
    ring = ct.params.ring()
    pidx = list(range(ct.level + 1))
    m = ring.add(ct.data[0], ring.mul(ct.data[1], ctx.secret[pidx], pidx), pidx)
    return Plaintext(m, ct.scale, ct.level, ct.params)


def encrypt_values(ctx, values, rng=None, scale=None, level=None) -> Ciphertext:
    return encrypt(ctx, encode(ctx.params, values, scale, level), rng)


def decrypt_values(ctx, ct: Ciphertext) -> np.ndarray:
    return decode(decrypt(ctx, ct))


# ---------------------------------------------------------------------------
# homomorphic operations


def _check_aligned(level_a, scale_a, level_b, scale_b):
    if level_a != level_b:
        raise AlignmentError(f"level mismatch: {level_a} vs {level_b}")
    if not math.isclose(scale_a, scale_b, rel_tol=1e-9):
        raise AlignmentError(f"scale mismatch: {scale_a} vs {scale_b}")


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_aligned(a.level, a.scale, b.level, b.scale)
    ring = a.params.ring()
    pidx = list(range(a.level + 1))
    data = np.stack([ring.add(a.data[i], b.data[i], pidx) for i in (0, 1)])
    return Ciphertext(data, a.scale, a.level, a.params)


def add_plain(a: Ciphertext, p: Plaintext) -> Ciphertext:
    _check_aligned(a.level, a.scale, p.level, p.scale)
    ring = a.params.ring()
    pidx = list(range(a.level + 1))
    data = a.data.copy()
    data[0] = ring.add(a.data[0], p.data, pidx)
    return Ciphertext(data, a.scale, a.level, a.params)


def multiply_plain(a: Ciphertext, p, rescale_result: bool = True) -> Ciphertext:
    """Ciphertext-plaintext product followed by a rescale.

    ``p`` is a :class:`Plaintext` at the ciphertext's level or a vector of
    real values.  Values are encoded at the scale of the prime that the
    rescale removes, so the ciphertext scale comes back unchanged.
    """
    if a.level < 1:
        raise DepthError("modulus chain exhausted: no level left to rescale into")
    ring = a.params.ring()
    if not isinstance(p, Plaintext):
        p = encode(a.params, p, scale=ring.primes[a.level], level=a.level)
    if p.level != a.level:
        raise AlignmentError(f"plaintext level {p.level} != ciphertext level {a.level}")
    pidx = list(range(a.level + 1))
    data = ring.mul(a.data, p.data[None], pidx)
    out = Ciphertext(data, a.scale * p.scale, a.level, a.params)
    return rescale(out) if rescale_result else out


def multiply_int(a: Ciphertext, c: int, scale: float) -> Ciphertext:
    """Multiply by an integer constant that represents a value at ``scale``."""
    ring = a.params.ring()
    pidx = list(range(a.level + 1))
    return Ciphertext(ring.mul_int(a.data, c, pidx), a.scale * scale, a.level, a.params)


def _drop_last(ring: Ring, data: np.ndarray, last: int, keep) -> np.ndarray:
    """(x - [x]_{q_last}) / q_last on the kept primes; data over keep + [last]."""
    keep = list(keep)
    tail = ring.intt(data[..., -1, :], [last])
    lifted = ring.centered(tail, last)
    corr = ring.ntt(ring.from_signed(lifted, keep), keep)
    diff = ring.sub(data[..., :-1, :], corr, keep)
    return ring.mul_int(diff, pow(ring.primes[last], -1, _prod(ring, keep)), keep)


def _prod(ring: Ring, pidx) -> int:
    out = 1
    for p in pidx:
        out *= ring.primes[p]
    return out


def rescale(a: Ciphertext) -> Ciphertext:
    """Divide by the last prime of the current modulus and drop it."""
    if a.level < 1:
        raise DepthError("cannot rescale at level 0")
    ring = a.params.ring()
    q = ring.primes[a.level]
    keep = list(range(a.level))
    data = _drop_last(ring, a.data, a.level, keep)
    return Ciphertext(data, a.scale / q, a.level - 1, a.params)


def _key_switch(ring: Ring, c: np.ndarray, key: np.ndarray, level: int):
    """Key-switch the NTT-form polynomial c (level + 1 primes) with ``key``."""
    chain = list(range(level + 1))
    ext = chain + [ring.special]
    coef = ring.intt(c, chain)
    digits = np.stack([ring.centered(coef[i], i) for i in chain])  # (D, N)
    lifted = ring.from_signed(digits, ext)  # (D, len(ext), N)
    lifted = ring.ntt(lifted, ext)
    rows = np.asarray(ext, dtype=np.int64)
    k = key[: level + 1][:, :, rows, :]  # (D, 2, ext, N)
    from ._kernels import mac_digits

    out = []
    for j in (0, 1):
        acc = mac_digits(np.ascontiguousarray(lifted), np.ascontiguousarray(k[:, j]),
                         rows, ring.qs, ring.qinv, ring.r2)
        out.append(_drop_last(ring, acc, ring.special, chain))
    return out


def rotate(ctx, a: Ciphertext, step: int) -> Ciphertext:
    """Cyclic left rotation of the slot vector by ``step``."""
    params = a.params
    step = int(step) % params.slots
    if step == 0:
        return a.copy()
    keys = ctx.galois_keys
    if step in keys:
        return _apply_galois(a, keys[step])
    if step - params.slots in keys:
        return _apply_galois(a, keys[step - params.slots])
    for path in (_pow2_path(step, 1), _pow2_path(params.slots - step, -1)):
        if all(s in keys for s in path):
            out = a
            for s in path:
                out = _apply_galois(out, keys[s])
            return out
    raise CapabilityError(f"no Galois key path for rotation by {step}")


def _pow2_path(k: int, sign: int) -> list[int]:
    out = []
    bit = 1
    while k:
        if k & 1:
            out.append(sign * bit)
        k >>= 1
        bit <<= 1
    return out


def _apply_galois(a: Ciphertext, key: GaloisKey) -> Ciphertext:
    ring = a.params.ring()
    perm = ring.galois_perm(key.galois_elt)
    c0 = a.data[0][:, perm]
    c1 = a.data[1][:, perm]
    ks0, ks1 = _key_switch(ring, c1, key.data, a.level)
    pidx = list(range(a.level + 1))
    return Ciphertext(np.stack([ring.add(c0, ks0, pidx), ks1]), a.scale, a.level, a.params)
