#!/usr/bin/env python3
"""Ciphertext bytes and time per batch for every standard parameter set, both packings.

Adds a third column per set: the size of one-ciphertext-per-element encryption
of the same activation map, the baseline that batch encryption is usually
compared against.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import asdict
from pathlib import Path

import numpy as np

from hesplit import ckks
from hesplit.app.bench import bench_he


def plot(path: Path, rows) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = sorted({r.params for r in rows}, key=[r.params for r in rows].index)
    get = {(r.params, r.be): r for r in rows}
    x = np.arange(len(labels))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for off, be, name in ((-0.27, False, "BE=false (rows)"), (0.0, True, "BE=true (columns)")):
        ax1.bar(x + off, [get[(l, be)].ct_bytes_per_batch for l in labels], 0.27, label=name)
        ax2.bar(x + off / 2 * 1.5, [get[(l, be)].batch_time_s for l in labels], 0.4, label=name)
    ax1.bar(x + 0.27, [get[(l, True)].per_element_am_bytes for l in labels], 0.27, label="one ct per element (AM only)")
    ax1.set_yscale("log")
    ax1.set_ylabel("bytes per batch")
    ax2.set_ylabel("seconds per batch")
    for ax in (ax1, ax2):
        ax.set_xticks(x, labels, rotation=25, ha="right", fontsize=7)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sets", nargs="*", default=[p.label() for p in ckks.STANDARD_PARAM_SETS])
    ap.add_argument("--model", default="M1")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--batches", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/bench")
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = [ckks.HEParams.parse(s) for s in a.sets]
    rows = bench_he(sets, model=a.model, batch=a.batch, batches=a.batches, seed=a.seed,
                    progress=lambda r: print(f"{r.params:26s} BE={str(r.be):5s} {r.ct_bytes_per_batch:>10d} B "
                                             f"{r.batch_time_s:7.3f} s  err {r.max_abs_error:.1e}", flush=True))
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(asdict(rows[0])))
        w.writeheader()
        w.writerows(asdict(r) for r in rows)
    plot(out / "bench.svg", rows)
    print(f"wrote {out}/bench.csv and {out}/bench.svg")


if __name__ == "__main__":
    main()
