"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from hesplit import nn


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def naive_conv1d(x, w, b, stride=1, padding=0):
    n, c_in, t = x.shape
    c_out, _, m = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    t_out = (t + 2 * padding - m) // stride + 1
    y = np.zeros((n, c_out, t_out))
    for s in range(n):
        for o in range(c_out):
            for p in range(t_out):
                acc = b[o]
                for i in range(c_in):
                    for k in range(m):
                        acc += w[o, i, k] * xp[s, i, p * stride + k]
                y[s, o, p] = acc
    return y


def negacyclic_mul(a, b, q):
    """Schoolbook product in Z_q[X]/(X^N + 1) with Python integers."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            v = int(a[i]) * int(b[j])
            if k < n:
                out[k] += v
            else:
                out[k - n] -= v
    return np.array([v % q for v in out], dtype=np.uint64)


def layer_gradcheck_cases(rng: np.random.Generator) -> dict:
    """One random instance per layer type: name -> (analytic, numeric)."""
    res = {}
    u = lambda *s: rng.uniform(-1, 1, s)

    x, w, b = u(2, 3, 11), u(4, 3, 5), u(4)
    up = u(2, 4, 11)
    layer = nn.Conv1DLayer(w, b, 1, 2)
    loss = lambda: float((nn.conv1d_forward(layer, x) * up).sum())
    dw, db, dx = nn.conv1d_backward(layer, x, up)
    res["conv1d"] = (np.concatenate([dw.ravel(), db, dx.ravel()]),
                     np.concatenate([numeric_grad(loss, w).ravel(), numeric_grad(loss, b),
                                     numeric_grad(loss, x).ravel()]))

    a, lw, lb, up = u(4, 7), u(7, 5), u(5), u(4, 5)
    lin = nn.LinearLayer(lw, lb)
    loss = lambda: float((nn.linear_forward(lin, a) * up).sum())
    dw, db, da = nn.linear_backward(lin, a, up)
    res["linear"] = (np.concatenate([dw.ravel(), db, da.ravel()]),
                     np.concatenate([numeric_grad(loss, lw).ravel(), numeric_grad(loss, lb),
                                     numeric_grad(loss, a).ravel()]))

    z, up = u(3, 2, 9), u(3, 2, 9)
    z[np.abs(z) < 1e-3] += 1e-2  # keep away from the kink
    loss = lambda: float((nn.leaky_relu(z) * up).sum())
    res["leaky_relu"] = (nn.leaky_relu_backward(z, up).ravel(), numeric_grad(loss, z).ravel())

    z, up = u(3, 2, 10), u(3, 2, 5)
    loss = lambda: float((nn.maxpool1d_forward(z)[0] * up).sum())
    _, idx = nn.maxpool1d_forward(z)
    res["maxpool"] = (nn.maxpool1d_backward(up, idx, z.shape[-1]).ravel(), numeric_grad(loss, z).ravel())

    logits = u(4, 5) * 3
    y = np.eye(5)[rng.integers(0, 5, 4)]
    loss = lambda: nn.cross_entropy_loss(nn.softmax(logits), y)
    res["softmax_ce"] = (nn.softmax_ce_grad(nn.softmax(logits), y).ravel(), numeric_grad(loss, logits).ravel())
    return res


# ---- acceptance report ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> bool:
    """Record and print the one-line verdict for acceptance criterion ``n``."""
    line = f"[{'PASS' if ok else 'FAIL'}] AC{n} {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line, flush=True)
    return ok
