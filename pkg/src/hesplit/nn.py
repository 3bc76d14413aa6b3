"""1D CNN primitives with hand-written forward and backward passes.

Arrays are float64 numpy arrays laid out (sample, channel, timestep).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layers


@dataclass
class Conv1DLayer:
    w: np.ndarray  # [C_out, C_in, m]
    b: np.ndarray  # [C_out]
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]

    def out_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.kernel_size) // self.stride + 1


@dataclass
class LinearLayer:
    w: np.ndarray  # [in, out]
    b: np.ndarray  # [out]

    @property
    def in_features(self) -> int:
        return self.w.shape[0]

    @property
    def out_features(self) -> int:
        return self.w.shape[1]


def _windows(x: np.ndarray, m: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    if x.shape[-1] < m:
        raise DimensionError(f"kernel {m} longer than padded input {x.shape[-1]}")
    return sliding_window_view(x, m, axis=2)[:, :, ::stride, :]  # [n, C, T', m]


def conv1d_forward(layer: Conv1DLayer, x: np.ndarray) -> np.ndarray:
    """y[:, j] = b[j] + sum_i w[j, i] (cross-correlated with) x[:, i]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != layer.in_channels:
        raise DimensionError(f"conv expects [n, {layer.in_channels}, T], got {x.shape}")
    cols = _windows(x, layer.kernel_size, layer.stride, layer.padding)
    return np.einsum("nctk,ock->not", cols, layer.w, optimize=True) + layer.b[None, :, None]


def conv1d_backward(layer: Conv1DLayer, x: np.ndarray, grad_out: np.ndarray):
    """Returns (dw, db, dx) for the forward input ``x``."""
    m, s, p = layer.kernel_size, layer.stride, layer.padding
    cols = _windows(x, m, s, p)
    dw = np.einsum("nctk,not->ock", cols, grad_out, optimize=True)
    db = grad_out.sum(axis=(0, 2))
    n, _, t = x.shape
    t_out = grad_out.shape[2]
    dxp = np.zeros((n, layer.in_channels, t + 2 * p))
    for k in range(m):
        dxp[:, :, k: k + s * (t_out - 1) + 1: s] += np.einsum(
            "not,oc->nct", grad_out, layer.w[:, :, k], optimize=True)
    return dw, db, dxp[:, :, p: p + t]


def leaky_relu(x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, grad_out, alpha * grad_out)


def maxpool1d_forward(x: np.ndarray, k: int = 2, stride: int = 2):
    """Windowed maxima and the absolute argmax position of every window."""
    if k < 1 or stride < 1:
        raise ValueError("pool window and stride must be >= 1")
    if x.shape[-1] < k:
        raise DimensionError(f"pool window {k} larger than input length {x.shape[-1]}")
    win = sliding_window_view(x, k, axis=-1)[..., ::stride, :]
    rel = win.argmax(axis=-1)
    idx = rel + stride * np.arange(win.shape[-2])
    return np.take_along_axis(x, idx, axis=-1), idx


def maxpool1d_backward(grad_out: np.ndarray, indices: np.ndarray, length: int) -> np.ndarray:
    grad = np.zeros(grad_out.shape[:-1] + (length,))
    lead = np.indices(grad_out.shape)[:-1]
    np.add.at(grad, (*lead, indices), grad_out)
    return grad


def linear_forward(layer: LinearLayer, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != layer.in_features:
        raise DimensionError(f"linear expects {layer.in_features} features, got {a.shape[-1]}")
    return a @ layer.w + layer.b


def linear_backward(layer: LinearLayer, a: np.ndarray, grad_out: np.ndarray):
    """(dw, db, da).  The bias gradient is the batch sum."""
    return a.T @ grad_out, grad_out.sum(axis=0), grad_out @ layer.w.T


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean over the batch of -sum(y log y_hat), probabilities floored at 1e-12."""
    p = np.clip(y_hat, PROB_FLOOR, 1.0)
    return float(-(y * np.log(p)).sum() / y.shape[0])


def softmax_ce_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the logits: (y_hat - y) / n."""
    return (y_hat - y) / y.shape[0]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """In-place Adam update of every entry of ``params`` that has a gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        params[name] -= lr * g


# ---------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class Architecture:
    name: str
    in_channels: int
    length: int
    conv1_channels: int = 16
    conv1_kernel: int = 7
    conv2_channels: int = 8
    conv2_kernel: int = 5
    pool: int = 2
    classes: int = 5

    @property
    def am_features(self) -> int:
        t = self.length // self.pool // self.pool
        return self.conv2_channels * t


ARCHITECTURES = {
    "M1": Architecture("M1", 1, 128, conv2_channels=8),
    "M2": Architecture("M2", 1, 128, conv2_channels=16),
    "M3": Architecture("M3", 12, 1000, conv2_channels=8),
}

CLIENT_KEYS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b")
SERVER_KEYS = ("fc.w", "fc.b")
LEAKY_ALPHA = 0.01
INIT_RANGE = 0.05


@dataclass
class ModelParams:
    """All trainable arrays.  Split point: conv layers client side, ``fc`` server side."""

    arch: Architecture
    tensors: dict

    def client_part(self) -> dict:
        return {k: self.tensors[k] for k in CLIENT_KEYS}

    def server_part(self) -> dict:
        return {k: self.tensors[k] for k in SERVER_KEYS}

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in CLIENT_KEYS + SERVER_KEYS])


def init_params(arch: Architecture | str, seed: int = 0) -> ModelParams:
    if isinstance(arch, str):
        arch = ARCHITECTURES[arch]
    rng = np.random.default_rng(seed)
    shapes = {
        "conv1.w": (arch.conv1_channels, arch.in_channels, arch.conv1_kernel),
        "conv1.b": (arch.conv1_channels,),
        "conv2.w": (arch.conv2_channels, arch.conv1_channels, arch.conv2_kernel),
        "conv2.b": (arch.conv2_channels,),
        "fc.w": (arch.am_features, arch.classes),
        "fc.b": (arch.classes,),
    }
    return ModelParams(arch, {k: rng.uniform(-INIT_RANGE, INIT_RANGE, s) for k, s in shapes.items()})


@dataclass
class ActivationCache:
    x: np.ndarray | None = None
    z1: np.ndarray | None = None
    a1: np.ndarray | None = None
    idx1: np.ndarray | None = None
    z2: np.ndarray | None = None
    a2: np.ndarray | None = None
    idx2: np.ndarray | None = None

    def clear(self) -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, None)


def _conv(params: dict, name: str, arch: Architecture) -> Conv1DLayer:
    w = params[f"{name}.w"]
    return Conv1DLayer(w, params[f"{name}.b"], 1, w.shape[2] // 2)


def client_forward(params: dict, arch: Architecture, x: np.ndarray, cache: ActivationCache) -> np.ndarray:
    """conv, leaky ReLU, pool, twice; returns the flattened activation map [n, d]."""
    cache.clear()
    cache.x = x
    cache.z1 = conv1d_forward(_conv(params, "conv1", arch), x)
    cache.a1, cache.idx1 = maxpool1d_forward(leaky_relu(cache.z1, LEAKY_ALPHA), arch.pool, arch.pool)
    cache.z2 = conv1d_forward(_conv(params, "conv2", arch), cache.a1)
    cache.a2, cache.idx2 = maxpool1d_forward(leaky_relu(cache.z2, LEAKY_ALPHA), arch.pool, arch.pool)
    return cache.a2.reshape(x.shape[0], -1)


def client_backward(params: dict, arch: Architecture, cache: ActivationCache, grad_am: np.ndarray) -> dict:
    if cache.a2 is None:
        raise StateError("client_backward called without a cached forward pass")
    g = grad_am.reshape(cache.a2.shape)
    g = maxpool1d_backward(g, cache.idx2, cache.z2.shape[-1])
    g = leaky_relu_backward(cache.z2, g, LEAKY_ALPHA)
    dw2, db2, g = conv1d_backward(_conv(params, "conv2", arch), cache.a1, g)
    g = maxpool1d_backward(g, cache.idx1, cache.z1.shape[-1])
    g = leaky_relu_backward(cache.z1, g, LEAKY_ALPHA)
    dw1, db1, _ = conv1d_backward(_conv(params, "conv1", arch), cache.x, g)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2}


def server_layer(params: dict) -> LinearLayer:
    return LinearLayer(params["fc.w"], params["fc.b"])


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits of the full (unsplit) model."""
    am = client_forward(model.tensors, model.arch, x, ActivationCache())
    return linear_forward(server_layer(model.tensors), am)


def predict(model: ModelParams, x: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([forward(model, x[i: i + batch]).argmax(axis=1)
                           for i in range(0, len(x), batch)]) if len(x) else np.zeros(0, dtype=int)
