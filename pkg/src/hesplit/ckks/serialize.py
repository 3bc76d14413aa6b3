"""Canonical byte layouts for ciphertexts, encrypted matrices and contexts.

All integers are little-endian.  Residues are written as u64 words in the
NTT (evaluation) representation, prime by prime.
"""

from __future__ import annotations

import struct

import numpy as np

from .matrix import EncryptedMatrix, Layout
from .scheme import (
    Ciphertext,
    GaloisKey,
    HEParams,
    ParameterError,
    PrivateContext,
    PublicContext,
)

VERSION = 1
_CT_HEAD = struct.Struct("<4sBIBBd")  # magic, version, N, chain length, level, scale
_EM_HEAD = struct.Struct("<4sBBIIII")  # magic, version, layout, rows, cols, stride, n_slots
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def _arr(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<u8").tobytes()


def ciphertext_to_bytes(ct: Ciphertext) -> bytes:
    p = ct.params
    head = _CT_HEAD.pack(b"HECT", VERSION, p.poly_degree, len(p.coeff_bits), ct.level, ct.scale)
    return head + _arr(ct.data)


def ciphertext_from_bytes(buf: bytes, params: HEParams) -> Ciphertext:
    if len(buf) < _CT_HEAD.size:
        raise FormatError("truncated ciphertext header")
    magic, ver, n, chain, level, scale = _CT_HEAD.unpack_from(buf)
    if magic != b"HECT" or ver != VERSION:
        raise FormatError("not a ciphertext")
    if n != params.poly_degree or chain != len(params.coeff_bits) or level > params.max_level:
        raise FormatError("ciphertext does not match the context parameters")
    count = 2 * (level + 1) * n
    if len(buf) != _CT_HEAD.size + 8 * count:
        raise FormatError("ciphertext length mismatch")
    data = np.frombuffer(buf, dtype="<u8", count=count, offset=_CT_HEAD.size)
    return Ciphertext(data.astype(np.uint64).reshape(2, level + 1, n), scale, level, params)


def matrix_to_bytes(em: EncryptedMatrix) -> bytes:
    rows, cols = em.shape
    slots = np.asarray(em.slots, dtype="<u4")
    parts = [_EM_HEAD.pack(b"HEEM", VERSION, int(em.layout), rows, cols, em.stride, slots.size),
             slots.tobytes(), _U32.pack(len(em.cts))]
    for ct in em.cts:
        b = ciphertext_to_bytes(ct)
        parts += [_U32.pack(len(b)), b]
    return b"".join(parts)


def matrix_from_bytes(buf: bytes, params: HEParams) -> EncryptedMatrix:
    try:
        magic, ver, layout, rows, cols, stride, nsl = _EM_HEAD.unpack_from(buf)
        if magic != b"HEEM" or ver != VERSION:
            raise FormatError("not an encrypted matrix")
        off = _EM_HEAD.size
        slots = np.frombuffer(buf, dtype="<u4", count=nsl, offset=off).astype(np.int64)
        off += 4 * nsl
        (count,) = _U32.unpack_from(buf, off)
        off += 4
        cts = []
        for _ in range(count):
            (ln,) = _U32.unpack_from(buf, off)
            off += 4
            if off + ln > len(buf):
                raise FormatError("truncated ciphertext")
            cts.append(ciphertext_from_bytes(buf[off:off + ln], params))
            off += ln
        if off != len(buf):
            raise FormatError("trailing bytes after encrypted matrix")
        return EncryptedMatrix(Layout(layout), cts, (rows, cols), slots, stride)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from None


def serialized_size(x) -> int:
    """Exact byte length of the canonical serialization of ``x``."""
    if isinstance(x, Ciphertext):
        return _CT_HEAD.size + 8 * x.data.size
    if isinstance(x, EncryptedMatrix):
        return (_EM_HEAD.size + 4 * len(np.asarray(x.slots)) + 4
                + sum(4 + serialized_size(ct) for ct in x.cts))
    raise TypeError(f"cannot size {type(x).__name__}")


# ---- contexts ---------------------------------------------------------------

def params_to_bytes(p: HEParams) -> bytes:
    return struct.pack(f"<IB{len(p.coeff_bits)}BB", p.poly_degree, len(p.coeff_bits),
                       *p.coeff_bits, p.scale_bits)


def params_from_bytes(buf: bytes, off: int = 0) -> tuple[HEParams, int]:
    n, k = struct.unpack_from("<IB", buf, off)
    off += 5
    bits = struct.unpack_from(f"<{k}B", buf, off)
    off += k
    (sb,) = struct.unpack_from("<B", buf, off)
    try:
        return HEParams(n, bits, sb), off + 1
    except ParameterError as exc:
        raise FormatError(str(exc)) from None


def public_context_to_bytes(ctx: PublicContext) -> bytes:
    """Public key and Galois keys; never includes the secret key."""
    if isinstance(ctx, PrivateContext):
        ctx = ctx.public
    parts = [b"HEPK", bytes([VERSION]), params_to_bytes(ctx.params), _arr(ctx.public_key),
             _U32.pack(len(ctx.galois_keys))]
    for step in sorted(ctx.galois_keys):
        gk = ctx.galois_keys[step]
        parts += [struct.pack("<iI", step, gk.galois_elt), _arr(gk.data)]
    return b"".join(parts)


def public_context_from_bytes(buf: bytes) -> PublicContext:
    try:
        if buf[:4] != b"HEPK" or buf[4] != VERSION:
            raise FormatError("not a public context")
        params, off = params_from_bytes(buf, 5)
        n, L = params.poly_degree, len(params.coeff_bits)
        count = 2 * L * n
        pk = np.frombuffer(buf, dtype="<u8", count=count, offset=off).astype(np.uint64)
        off += 8 * count
        ctx = PublicContext(params, pk.reshape(2, L, n))
        (ng,) = _U32.unpack_from(buf, off)
        off += 4
        kcount = L * 2 * (L + 1) * n
        for _ in range(ng):
            step, g = struct.unpack_from("<iI", buf, off)
            off += 8
            data = np.frombuffer(buf, dtype="<u8", count=kcount, offset=off).astype(np.uint64)
            off += 8 * kcount
            ctx.galois_keys[step] = GaloisKey(g, data.reshape(L, 2, L + 1, n))
        if off != len(buf):
            raise FormatError("trailing bytes after public context")
        return ctx
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from None


def private_context_to_bytes(ctx: PrivateContext) -> bytes:
    """Explicit export including the secret key (client-side storage only)."""
    sk = _arr(ctx.secret)
    return b"HESK" + bytes([VERSION]) + _U32.pack(len(sk)) + sk + public_context_to_bytes(ctx.public)


def private_context_from_bytes(buf: bytes) -> PrivateContext:
    if buf[:4] != b"HESK" or buf[4] != VERSION:
        raise FormatError("not a private context")
    (ln,) = _U32.unpack_from(buf, 5)
    pub = public_context_from_bytes(buf[9 + ln:])
    n = pub.params.poly_degree
    sk = np.frombuffer(buf, dtype="<u8", count=ln // 8, offset=9).astype(np.uint64)
    return PrivateContext(pub.params, sk.reshape(-1, n), pub)
