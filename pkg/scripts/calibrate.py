#!/usr/bin/env python3
"""Measure CKKS error per standard parameter set and write ckks/calibration.json."""

import argparse
import json
import time

from hesplit import ckks
from hesplit.ckks import calibration


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(calibration.PATH))
    args = ap.parse_args()
    measured, bounds = {}, {}
    for p in ckks.STANDARD_PARAM_SETS:
        t0 = time.perf_counter()
        m = calibration.measure(p, args.trials, args.seed)
        measured[p.label()] = m
        bounds[p.label()] = calibration.bounds_from(m)
        print(f"{p.label():24s} {time.perf_counter() - t0:6.1f}s  " +
              "  ".join(f"{k}={v:.2e}" for k, v in m.items()), flush=True)
    doc = {"trials": args.trials, "seed": args.seed, "safety": calibration.SAFETY,
           "measured": measured, "bounds": bounds}
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
