#!/usr/bin/env python3
"""Acceptance criterion 9: desk-scale ablation (full vs no_decoder vs no_hierarchy).

Trains every variant for 40 epochs on the multi-scale synthetic set for each
seed, prints one line per run and the median verdict, and writes
<out>/ablation.json.  Expect ~10 minutes per seed on one CPU core.
"""

import argparse
import json
import sys

from hutformer.experiments import ablation, ablation_verdict


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="full,no_decoder,no_hierarchy")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--stride", type=int, default=72, help="train/eval sample stride in steps")
    p.add_argument("--batch-size", type=int, default=32)
    args = p.parse_args()
    report = ablation(seeds=[int(s) for s in args.seeds.split(",")], variants=args.variants.split(","),
                      out_dir=args.out, epochs=args.epochs, stride=args.stride, batch_size=args.batch_size,
                      emit=lambda line: print(line, flush=True))
    print(json.dumps(report["median_test_mae"], indent=2), "HI", report["hi_median_test_mae"])
    if {"full", "no_decoder", "no_hierarchy"} <= set(report["median_test_mae"]):
        ok, detail = ablation_verdict(report)
        print(("PASS" if ok else "FAIL"), detail)
        return 0 if ok else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
