"""HE sweep: per-batch time, ciphertext bytes and forward fidelity per parameter set."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import ckks, nn
from ..channel import SEAL_OVERHEAD, frame_size, pack_arrays
from ..data import one_hot, synth_for


@dataclass
class BenchRow:
    params: str
    be: bool
    batch_time_s: float
    am_ct_bytes: int
    out_ct_bytes: int
    ct_bytes_per_batch: int
    framed_bytes_per_batch: int
    max_abs_error: float
    am_ciphertexts: int
    per_element_am_bytes: int  # one ciphertext per scalar, for reference

    def row(self) -> dict:
        return asdict(self)


def bench_one(p: ckks.HEParams, be: bool, model: str = "M1", batch: int = 4, batches: int = 2,
              seed: int = 0) -> BenchRow:
    arch = nn.ARCHITECTURES[model]
    params = nn.init_params(arch, seed)
    ds = synth_for(model, batch * batches, seed)
    layout = ckks.Layout.BATCHED if be else ckks.Layout.PER_ROW
    rng = np.random.default_rng(seed)
    rots = [] if be else ckks.required_rotations(p, arch.am_features)
    priv, pub = ckks.keygen(p, rotations=rots, rng=rng)
    w, b = params.tensors["fc.w"], params.tensors["fc.b"]
    times, errs = [], []
    am_bytes = out_bytes = framed = n_ct = 0
    for k in range(batches):
        x = ds.x[k * batch:(k + 1) * batch]
        y = one_hot(ds.y[k * batch:(k + 1) * batch], arch.classes)
        t0 = time.perf_counter()
        cache = nn.ActivationCache()
        am = nn.client_forward(params.tensors, arch, x, cache)
        em = ckks.batch_encrypt_matrix(priv, am, layout, rng=rng)
        am_blob = ckks.matrix_to_bytes(em)
        out = ckks.he_linear(pub, ckks.matrix_from_bytes(am_blob, p), w, b)
        out_blob = ckks.matrix_to_bytes(out)
        logits = ckks.batch_decrypt_matrix(priv, ckks.matrix_from_bytes(out_blob, p))
        g = nn.softmax_ce_grad(nn.softmax(logits), y)
        grads = pack_arrays(g, am.T @ g)
        da = g @ w.T
        nn.client_backward(params.tensors, arch, cache, da)
        times.append(time.perf_counter() - t0)
        errs.append(float(np.abs(logits - nn.linear_forward(nn.LinearLayer(w, b), am)).max()))
        am_bytes, out_bytes, n_ct = len(am_blob), len(out_blob), len(em)
        framed = (frame_size(len(am_blob)) + frame_size(len(out_blob)) + frame_size(len(grads) + SEAL_OVERHEAD)
                  + frame_size(len(pack_arrays(da)) + SEAL_OVERHEAD))
    one_ct = ckks.serialized_size(ckks.encrypt_values(priv, [0.0], rng=rng))
    return BenchRow(p.label(), be, float(np.median(times)), am_bytes, out_bytes, am_bytes + out_bytes, framed,
                    max(errs), n_ct, one_ct * batch * arch.am_features)


def bench_he(param_sets, be_flags=(False, True), model: str = "M1", batch: int = 4, batches: int = 2,
             seed: int = 0, progress=None) -> list[BenchRow]:
    rows = []
    for p in param_sets:
        for be in be_flags:
            rows.append(bench_one(p, be, model, batch, batches, seed))
            if progress:
                progress(rows[-1])
    return rows
