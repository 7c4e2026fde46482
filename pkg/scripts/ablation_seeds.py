#!/usr/bin/env python3
"""Check the inhibition/integration orderings on restrictive features across seeds.

Counts, per ordering, how many seeded runs satisfy it (at the restrictive
threshold by default).

    python3 scripts/ablation_seeds.py --seeds 0 1 2 3 4
"""
import argparse

from mlcam.ablation import MODES
from mlcam.experiments import orderings, run_synthetic, summary_lines


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--mode", choices=MODES, default="restrictive")
    args = ap.parse_args()

    held: dict[str, list[int]] = {}
    for seed in args.seeds:
        result = run_synthetic("restrictive", seed)
        print("\n".join(summary_lines(result)), flush=True)
        for name, ok in orderings(result, args.mode).items():
            held.setdefault(name, []).append(seed if ok else -1)
    print(f"\norderings at the {args.mode} threshold:")
    for name, seeds in held.items():
        good = [s for s in seeds if s >= 0]
        print(f"  {name:<20} {len(good)}/{len(seeds)} seeds  (held for {good})")


if __name__ == "__main__":
    main()
