"""Encrypted matrices and the plaintext-weight linear layer ``A @ W + b``.

Two layouts carry an ``[n, d]`` activation matrix:

* ``PER_ROW``: one ciphertext per row; the row is zero-padded to a power of
  two ``stride`` and repeated across all slots so slot rotations act cyclically
  on the row.
* ``BATCHED``: one ciphertext per column holding the ``n`` batch entries.

``PER_ELEMENT`` (one ciphertext per scalar) exists only for size metering.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .ring import shoup
from .scheme import (
    AlignmentError,
    CapacityError,
    Ciphertext,
    HEParams,
    add,
    add_plain,
    decrypt_values,
    encode,
    encode_constant,
    encrypt_many,
    multiply_plain,
    rescale,
    rotate,
)


class Layout(enum.IntEnum):
    PER_ROW = 0
    BATCHED = 1
    PER_ELEMENT = 2


@dataclass
class EncryptedMatrix:
    layout: Layout
    cts: list[Ciphertext]
    shape: tuple[int, int]
    slots: np.ndarray  # slot index of each logical entry inside a ciphertext
    stride: int = 0  # PER_ROW inputs: repetition period of a row

    def __len__(self) -> int:
        return len(self.cts)


def next_pow2(x: int) -> int:
    return 1 << max(0, int(x) - 1).bit_length()


def required_rotations(params: HEParams, in_features: int) -> list[int]:
    """Galois steps used by :func:`he_linear_per_row` for ``in_features`` inputs."""
    stride = next_pow2(in_features)
    steps = []
    s = 1
    while s < stride:
        steps.append(s)
        s *= 2
    return steps


def batch_encrypt_matrix(ctx, m, layout: Layout, rng=None, level=None) -> EncryptedMatrix:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    rows, cols = m.shape
    params = ctx.params
    nslots = params.slots
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    layout = Layout(layout)
    if layout is Layout.PER_ROW:
        stride = next_pow2(cols)
        if stride > nslots:
            raise CapacityError(f"row of {cols} values does not fit {nslots} slots")
        padded = np.zeros((rows, stride))
        padded[:, :cols] = m
        reps = nslots // stride
        cts = encrypt_many(ctx, np.tile(padded, (1, reps)), rng, level=level)
        return EncryptedMatrix(layout, cts, (rows, cols), np.arange(cols), stride)
    if layout is Layout.BATCHED:
        if rows > nslots:
            raise CapacityError(f"batch of {rows} exceeds {nslots} slots")
        cts = encrypt_many(ctx, m.T, rng, level=level)
        return EncryptedMatrix(layout, cts, (rows, cols), np.arange(rows))
    cts = encrypt_many(ctx, m.reshape(-1, 1), rng, level=level)
    return EncryptedMatrix(layout, cts, (rows, cols), np.zeros(1, dtype=np.int64))


def batch_decrypt_matrix(ctx, em: EncryptedMatrix) -> np.ndarray:
    rows, cols = em.shape
    if em.layout is Layout.PER_ROW:
        return np.stack([decrypt_values(ctx, ct)[em.slots] for ct in em.cts])
    if em.layout is Layout.BATCHED:
        return np.stack([decrypt_values(ctx, ct)[em.slots] for ct in em.cts], axis=1)
    return np.array([decrypt_values(ctx, ct)[0] for ct in em.cts]).reshape(rows, cols)


def _check_weights(em: EncryptedMatrix, w, b):
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if w.ndim != 2 or w.shape[0] != em.shape[1] or b.size != w.shape[1]:
        raise AlignmentError(f"weights {w.shape} / bias {b.shape} do not match input {em.shape}")
    return w, b


def he_linear_per_row(ctx, em: EncryptedMatrix, w, b) -> EncryptedMatrix:
    """Evaluate ``row @ w + b`` on every row ciphertext (one level consumed).

    When all outputs fit side by side (``out * stride <= slots``) each output
    gets its own block of slots and a rotate-and-sum over the block yields the
    dot product.  Otherwise the hybrid diagonal method is used.  Either way all
    rotations run on the unrescaled product, where key-switching noise is
    negligible next to the enlarged scale, and a single rescale follows.
    """
    if em.layout is not Layout.PER_ROW:
        raise AlignmentError("he_linear_per_row needs a PER_ROW matrix")
    w, b = _check_weights(em, w, b)
    params = em.cts[0].params if em.cts else ctx.params
    d, out = w.shape
    stride = em.stride
    nslots = params.slots
    if not em.cts:
        return EncryptedMatrix(Layout.PER_ROW, [], (0, out), np.arange(out))
    level = em.cts[0].level
    q_drop = params.ring().primes[level]
    if out * stride <= nslots:
        packed = np.zeros(nslots)
        for k in range(out):
            packed[k * stride: k * stride + d] = w[:, k]
        pts = [encode(params, packed, scale=q_drop, level=level)]
        shifts = None
        out_slots = np.arange(out) * stride
        sum_steps = _pow2_steps(1, stride)
    else:
        o = next_pow2(out)
        if o > stride:
            raise CapacityError("more outputs than the padded row length")
        wt = np.zeros((o, stride))
        wt[:out, :d] = w.T
        j = np.arange(stride)
        reps = nslots // stride
        pts = []
        for i in range(o):
            diag = wt[j % o, (j + i) % stride]
            pts.append(encode(params, np.tile(np.roll(diag, i), reps), scale=q_drop, level=level))
        shifts = o
        out_slots = np.arange(out)
        sum_steps = _pow2_steps(o, stride)

    bias = np.zeros(nslots)
    bias[out_slots] = b
    outs = []
    bias_pt = None
    for ct in em.cts:
        if ct.level != level:
            raise AlignmentError("row ciphertexts are at different levels")
        if shifts is None:
            acc = multiply_plain(ct, pts[0], rescale_result=False)
        else:
            prods = [multiply_plain(ct, p, rescale_result=False) for p in pts]
            acc = prods[-1]
            for prod in reversed(prods[:-1]):
                acc = add(rotate(ctx, acc, 1), prod)
        for s in sum_steps:
            acc = add(acc, rotate(ctx, acc, s))
        acc = rescale(acc)
        if bias_pt is None:
            bias_pt = encode(params, bias, scale=acc.scale, level=acc.level)
        outs.append(add_plain(acc, bias_pt))
    return EncryptedMatrix(Layout.PER_ROW, outs, (em.shape[0], out), out_slots)


def _pow2_steps(start: int, stop: int) -> list[int]:
    steps = []
    s = start
    while s < stop:
        steps.append(s)
        s *= 2
    return steps


def he_linear_batched(ctx, em: EncryptedMatrix, w, b) -> EncryptedMatrix:
    """Column-batched ``A @ w + b``: output column k is sum_j col_j * w[j, k] + b_k.

    Only ciphertext-by-scalar products are needed, so no rotations occur.
    """
    if em.layout is not Layout.BATCHED:
        raise AlignmentError("he_linear_batched needs a BATCHED matrix")
    w, b = _check_weights(em, w, b)
    d, out = w.shape
    ct0 = em.cts[0]
    params = ct0.params
    level = ct0.level
    ring = params.ring()
    pidx = list(range(level + 1))
    q_drop = ring.primes[level]
    for ct in em.cts:
        if ct.level != level or ct.scale != ct0.scale:
            raise AlignmentError("column ciphertexts are not aligned")
    ints = [[int(round(x * q_drop)) for x in row] for row in w]
    c = np.empty((d, out, 2 * len(pidx)), dtype=np.uint64)
    cp = np.empty_like(c)
    for r, p in enumerate(pidx * 2):
        q = ring.primes[p]
        vals = [[x % q for x in row] for row in ints]
        c[:, :, r] = vals
        cp[:, :, r] = [[shoup(x, q) for x in row] for row in vals]
    stacked = np.stack([ct.data.reshape(-1, ring.n) for ct in em.cts])
    rows_p = np.array(pidx * 2, dtype=np.int64)
    acc = K.dot_const(stacked, c, cp, rows_p, ring.qs)
    outs = []
    for k in range(out):
        ct = Ciphertext(acc[k].reshape(2, len(pidx), ring.n), ct0.scale * q_drop, level, params)
        ct = rescale(ct)
        outs.append(add_plain(ct, encode_constant(params, b[k], ct.scale, ct.level)))
    return EncryptedMatrix(Layout.BATCHED, outs, (em.shape[0], out), em.slots)


def he_linear(ctx, em: EncryptedMatrix, w, b) -> EncryptedMatrix:
    if em.layout is Layout.PER_ROW:
        return he_linear_per_row(ctx, em, w, b)
    if em.layout is Layout.BATCHED:
        return he_linear_batched(ctx, em, w, b)
    raise AlignmentError("linear layer is not implemented for PER_ELEMENT")
