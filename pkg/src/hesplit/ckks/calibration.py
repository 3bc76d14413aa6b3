"""Measured error bounds per parameter set.

``calibration.json`` is produced by ``scripts/calibrate.py``: each operation is
run on random inputs in [-1, 1] and the recorded bound is the largest observed
max-abs error times :data:`SAFETY`, rounded up to one significant digit.
"""

from __future__ import annotations

import json
import math
from functools import lru_cache
from pathlib import Path

import numpy as np

from .matrix import Layout, batch_decrypt_matrix, batch_encrypt_matrix, he_linear, required_rotations
from .scheme import HEParams, add, decrypt_values, encrypt_values, keygen, multiply_plain

PATH = Path(__file__).with_name("calibration.json")
SAFETY = 4.0
OPS = ("roundtrip", "add", "mul_plain", "linear")


def _round_up(x: float) -> float:
    if x <= 0:
        return 0.0
    e = math.floor(math.log10(x))
    return math.ceil(x / 10 ** e) * 10 ** e


def measure(p: HEParams, trials: int = 10, seed: int = 0, shape=(4, 256), out: int = 5) -> dict:
    """Largest observed max-abs error of each operation over ``trials`` instances."""
    rng = np.random.default_rng(seed)
    priv, pub = keygen(p, rotations=required_rotations(p, shape[1]), rng=rng)
    worst = dict.fromkeys(OPS, 0.0)
    n = p.slots
    for _ in range(trials):
        v, w = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        cv, cw = encrypt_values(priv, v, rng), encrypt_values(priv, w, rng)
        worst["roundtrip"] = max(worst["roundtrip"], np.abs(decrypt_values(priv, cv) - v).max())
        worst["add"] = max(worst["add"], np.abs(decrypt_values(priv, add(cv, cw)) - (v + w)).max())
        prod = decrypt_values(priv, multiply_plain(cv, w))
        worst["mul_plain"] = max(worst["mul_plain"], np.abs(prod - v * w).max())
        a, wm, b = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, (shape[1], out)), rng.uniform(-1, 1, out)
        ref = a @ wm + b
        for layout in (Layout.PER_ROW, Layout.BATCHED):
            em = batch_encrypt_matrix(priv, a, layout, rng)
            got = batch_decrypt_matrix(priv, he_linear(pub, em, wm, b))
            worst["linear"] = max(worst["linear"], np.abs(got - ref).max())
    return {k: float(v) for k, v in worst.items()}


def bounds_from(measured: dict) -> dict:
    return {k: _round_up(SAFETY * v) for k, v in measured.items()}


@lru_cache(maxsize=1)
def _table() -> dict:
    if not PATH.exists():
        return {}
    return json.loads(PATH.read_text())["bounds"]


def tolerance(p: HEParams, op: str) -> float:
    """Calibrated bound for ``op`` at ``p``; KeyError if the set was never calibrated."""
    return _table()[p.label()][op]
