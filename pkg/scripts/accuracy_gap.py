#!/usr/bin/env python3
"""Local vs plaintext split vs HE split on synthetic data; writes a summary CSV and an SVG.

    python3 scripts/accuracy_gap.py --sets 4096/[40,20,20]/2^21 --epochs 3 --out runs/gap
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hesplit import ckks
from hesplit.app.report import SUMMARY_COLUMNS, summary_row
from hesplit.data import synth_for, train_test_split
from hesplit.split import Mode, TrainConfig, run_split, train_local


@dataclass
class GapExperiment:
    model: str = "M1"
    train: int = 1000
    test: int = 200
    epochs: int = 3
    batch_size: int = 4
    lr: float = 0.001
    seed: int = 0
    batch_encrypt: bool = False
    sets: list[str] = field(default_factory=lambda: ["8192/[60,40,40,60]/2^40"])


def run(exp: GapExperiment, log=print) -> list[tuple[str, TrainConfig, list]]:
    ds = synth_for(exp.model, exp.train + exp.test, exp.seed)
    train, test = train_test_split(ds, exp.train / (exp.train + exp.test), exp.seed)
    base = dict(lr=exp.lr, batch_size=exp.batch_size, epochs=exp.epochs, model=exp.model, seed=exp.seed)
    runs = []
    cfg = TrainConfig(**base, mode=Mode.LOCAL)
    runs.append(("local", cfg, train_local(cfg, train, test)[1]))
    cfg = TrainConfig(**base, mode=Mode.SPLIT_PLAIN)
    runs.append(("split-plain", cfg, run_split(cfg, train, test)[0]))
    for text in exp.sets:
        p = ckks.HEParams.parse(text)
        cfg = TrainConfig(**base, mode=Mode.SPLIT_HE, he=p, batch_encrypt=exp.batch_encrypt)
        runs.append((p.label(), cfg, run_split(cfg, train, test, he_rng=exp.seed, timeout=7200)[0]))
    for name, _, hist in runs:
        log(f"{name:26s} " + "  ".join(f"e{m.epoch}: {m.test_acc:6.2f}%" for m in hist))
    return runs


def plot(path: Path, runs) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, _, hist in runs:
        ax.plot([m.epoch for m in hist], [m.test_acc for m in hist], marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    d = GapExperiment()
    for name in ("model", "train", "test", "epochs", "batch_size", "lr", "seed"):
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(getattr(d, name)), default=getattr(d, name))
    ap.add_argument("--be", action=argparse.BooleanOptionalAction, default=False)
    ap.add_argument("--sets", nargs="*", default=d.sets, help="HE parameter sets, N/[bits,...]/2^s")
    ap.add_argument("--out", default="runs/accuracy_gap")
    a = ap.parse_args()
    exp = GapExperiment(a.model, a.train, a.test, a.epochs, a.batch_size, a.lr, a.seed, a.be, a.sets)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = run(exp)
    plain = runs[1][2][-1].test_acc
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("run",) + SUMMARY_COLUMNS + ("gap_vs_plain_pp",))
        for name, cfg, hist in runs:
            row = summary_row(cfg, hist)
            w.writerow([name] + [row[c] for c in SUMMARY_COLUMNS] + [f"{plain - hist[-1].test_acc:.2f}"])
    (out / "experiment.txt").write_text("\n".join(f"{k} = {v}" for k, v in asdict(exp).items()) + "\n")
    plot(out / "accuracy.svg", runs)
    print(f"wrote {out}/summary.csv and {out}/accuracy.svg")


if __name__ == "__main__":
    main()
