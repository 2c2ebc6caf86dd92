#!/usr/bin/env python3
"""Acceptance criterion 8: stage-1 training on one fixed batch until normalized MAE < 1e-2."""

import argparse
import sys

from hutformer.experiments import overfit_single_batch


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    args = p.parse_args()
    res = overfit_single_batch(seed=args.seed, batch_size=args.batch_size, max_steps=args.max_steps,
                               learning_rate=args.lr)
    for step, value in res.trace:
        print(f"step {step:>5d}  normalized MAE {value:.5f}")
    print(f"{'PASS' if res.reached else 'FAIL'}: MAE {res.final_mae:.5f} after {res.steps} steps "
          f"({res.seconds:.0f} s)")
    return 0 if res.reached else 1


if __name__ == "__main__":
    sys.exit(main())
