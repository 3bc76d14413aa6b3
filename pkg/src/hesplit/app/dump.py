"""Dump raw inputs next to the split-layer activation maps they produce."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import nn


def activation_channels(params: dict, arch: nn.Architecture, x: np.ndarray) -> np.ndarray:
    """Split-layer activations of one sample as [channels, length]."""
    am = nn.client_forward(params, arch, x[None], nn.ActivationCache())
    return am.reshape(arch.conv2_channels, -1)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def best_correlation(x: np.ndarray, am: np.ndarray) -> tuple[int, float]:
    """Channel whose activation best tracks input channel 0 (block-averaged to the AM length)."""
    factor = x.shape[-1] // am.shape[-1]
    ref = x[0, : factor * am.shape[-1]].reshape(am.shape[-1], factor).mean(axis=1)
    scores = [_pearson(ref, ch) for ch in am]
    k = int(np.argmax(np.abs(scores)))
    return k, scores[k]


def dump_sample(out_dir, index: int, x: np.ndarray, am: np.ndarray) -> Path:
    path = Path(out_dir) / f"am_sample{index}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = max(x.shape[-1], am.shape[-1])
    head = ["t"] + [f"input_{c}" for c in range(x.shape[0])] + [f"am_{c}" for c in range(am.shape[0])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(head)
        for t in range(rows):
            xs = [f"{v:.9g}" if t < x.shape[-1] else "" for v in x[:, min(t, x.shape[-1] - 1)]]
            ams = [f"{v:.9g}" if t < am.shape[-1] else "" for v in am[:, min(t, am.shape[-1] - 1)]]
            w.writerow([t] + xs + ams)
    return path


def plot_sample(out_dir, index: int, x: np.ndarray, am: np.ndarray) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = 1 + am.shape[0]
    fig, axes = plt.subplots(n, 1, figsize=(6, 1.2 * n), sharex=False)
    axes[0].plot(x.T)
    axes[0].set_ylabel("input")
    for c, ax in enumerate(axes[1:]):
        ax.plot(am[c])
        ax.set_ylabel(f"am {c}")
    fig.tight_layout()
    path = Path(out_dir) / f"am_sample{index}.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def dump_activation_maps(params: dict, arch: nn.Architecture, ds, indices, out_dir, svg: bool = False) -> list[dict]:
    out = []
    for i in indices:
        if not 0 <= i < len(ds):
            raise IndexError(f"sample {i} outside [0, {len(ds)})")
        x = ds.x[i]
        am = activation_channels(params, arch, x)
        ch, r = best_correlation(x, am)
        files = [dump_sample(out_dir, i, x, am)]
        if svg:
            files.append(plot_sample(out_dir, i, x, am))
        out.append({"sample": i, "label": int(ds.y[i]), "input_series": x.shape[0], "am_series": am.shape[0],
                    "best_channel": ch, "pearson": r, "files": [str(f) for f in files]})
    return out
