"""Per-epoch CSV reports, a summary row and optional SVG plots."""

from __future__ import annotations

import csv
import math
from pathlib import Path

EPOCH_COLUMNS = ("epoch", "time_s", "loss", "train_acc", "test_acc", "bytes_c2s", "bytes_s2c")
SUMMARY_COLUMNS = ("network", "type", "be", "ring_degree", "chain", "scale",
                   "time_per_epoch_s", "test_acc", "bytes_per_epoch")
TIME_COLUMNS = ("time_s", "time_per_epoch_s")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return v


def write_epochs(path, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_COLUMNS)
        for m in history:
            r = m.row()
            w.writerow([_fmt(r[c]) for c in EPOCH_COLUMNS])
    return path


def summary_row(cfg, history) -> dict:
    """One row shaped like a results table: mean epoch time, final accuracy, bytes per epoch."""
    he = cfg.he
    kind = {"local": "Local", "split-plain": "Split (plaintext)", "split-he": "Split (HE)"}[cfg.mode.value]
    return {
        "network": cfg.model,
        "type": kind,
        "be": cfg.batch_encrypt if he else "",
        "ring_degree": he.poly_degree if he else "",
        "chain": "[" + ",".join(map(str, he.coeff_bits)) + "]" if he else "",
        "scale": f"2^{he.scale_bits}" if he else "",
        "time_per_epoch_s": sum(m.time_s for m in history) / max(len(history), 1),
        "test_acc": history[-1].test_acc if history else float("nan"),
        "bytes_per_epoch": (sum(m.bytes_c2s + m.bytes_s2c for m in history) // max(len(history), 1)),
    }


def write_summary(path, row: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return path


def plot_epochs(path, history, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ep = [m.epoch for m in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ep, [m.loss for m in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(ep, [m.train_acc for m in history], marker="o", label="train")
    ax2.plot(ep, [m.test_acc for m in history], marker="s", label="test")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy (%)")
    ax2.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_report(out_dir, cfg, history, fmt: str = "csv") -> dict:
    out = Path(out_dir)
    files = {"epochs": write_epochs(out / "epochs.csv", history),
             "summary": write_summary(out / "summary.csv", summary_row(cfg, history))}
    if fmt == "csv+svg" and history:
        files["plot"] = plot_epochs(out / "epochs.svg", history, f"{cfg.model} {cfg.mode.value}")
    return files
