#!/usr/bin/env python3
"""Randomized tamper/replay campaign against live split training; per-message-type detection table."""

from __future__ import annotations

import argparse
import collections
import csv
from pathlib import Path

from hesplit import ckks
from hesplit.app import attack
from hesplit.data import synth_for, train_test_split
from hesplit.split import Mode, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tampers", type=int, default=200)
    ap.add_argument("--replays", type=int, default=50)
    ap.add_argument("--he", default=None, help="run under HE with this parameter set (slower)")
    ap.add_argument("--samples", type=int, default=12, help="train+test samples; a third is held out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/attack")
    a = ap.parse_args()
    ds = synth_for("M1", a.samples, a.seed)
    train, test = train_test_split(ds, 2 / 3, a.seed)
    he = ckks.HEParams.parse(a.he) if a.he else None
    cfg = TrainConfig(batch_size=4, epochs=1, model="M1", mode=Mode.SPLIT_HE if he else Mode.SPLIT_PLAIN,
                      he=he, seed=a.seed)
    control, results = attack.run_campaign(
        cfg, train, test, tampers=a.tampers, replays=a.replays, seed=a.seed,
        progress=lambda k, r: print(f"{k:4d} {r.action.describe():28s} -> {r.victim}: {r.observed}", flush=True))
    by_type = collections.defaultdict(lambda: [0, 0])
    for r in results:
        cell = by_type[(control.seen[r.action.index].msg_type, r.action.kind)]
        cell[0] += r.detected
        cell[1] += 1
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "detections.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("action", "msg_type", "victim", "expected", "observed", "detected", "expected_class"))
        for r in results:
            w.writerow((r.action.describe(), control.seen[r.action.index].msg_type, r.victim, r.expected,
                        r.observed, int(r.detected), int(r.correct_class)))
    print(f"\ncontrol: {len(control.seen)} messages, clean={control.clean}")
    for (mt, kind), (hit, n) in sorted(by_type.items()):
        print(f"{mt:20s} {kind:7s} {hit:4d}/{n}")
    total = sum(r.detected for r in results)
    print(f"detected {total}/{len(results)}; wrote {out}/detections.csv")


if __name__ == "__main__":
    main()
