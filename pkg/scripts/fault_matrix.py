"""Run every fault script against every replica role and tabulate the outcome.

    python3 scripts/fault_matrix.py --n 7 --seeds 5
"""

import argparse
from collections import Counter

from fastbft.simnet import FAULT_KINDS, FaultSpec, Scenario, ScenarioError, run


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--requests", type=int, default=6)
    args = ap.parse_args()
    f = (args.n - 1) // 2
    roles = {"primary": 0, "internal": 1, "leaf": f, "passive": args.n - 1}
    print(f"{'fault':<28} {'role':<9} {'safe':>5} {'live':>5} {'vc':>5} {'trees':>6} {'fallback':>9}")
    for kind in sorted(FAULT_KINDS):
        for role, target in roles.items():
            scn = Scenario(n=args.n, faults=(FaultSpec(target, kind, start=3.0),), requests=args.requests)
            try:
                scn.validate()
            except ScenarioError:
                continue
            tally = Counter()
            for seed in range(args.seeds):
                rep = run(Scenario(**{**scn.__dict__, "seed": seed})).report
                tally.update(safe=rep.safety, live=rep.liveness, vc=rep.view_changes,
                             trees=rep.new_trees, fallback=rep.fallback_entries)
            k = args.seeds
            print(f"{kind:<28} {role:<9} {tally['safe']:>3}/{k} {tally['live']:>3}/{k} "
                  f"{tally['vc'] / k:>5.1f} {tally['trees'] / k:>6.1f} {tally['fallback'] / k:>9.1f}")


if __name__ == "__main__":
    main()
