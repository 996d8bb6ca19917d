"""Share-generation work per counter in the TEE, XOR versus Shamir, as n grows.

Counts operations instead of timing them, so the numbers are machine-independent.

    python3 scripts/preprocessing_trend.py --n-list 21,41,81,161
"""

import argparse
import random

from fastbft.primitives import make_provider
from fastbft.tee import TEE, KeyRegistry, OpCounter
from fastbft.topology import build_tree


def primary_tee(n: int) -> TEE:
    provider = make_provider("fast")
    tees = [TEE(i, provider, random.Random(i)) for i in range(n)]
    reg = KeyRegistry({t.id: t.verify_key for t in tees}, {t.id: t.enc_key for t in tees})
    f = (n - 1) // 2
    keys = {i: random.Random(f"k{i}").randbytes(16) for i in range(n)}
    tees[0].install_registry(reg)
    tees[0].genesis(range(n), build_tree(0, list(range(f + 1))), keys)
    return tees[0]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-list", default="21,41,81,161")
    args = ap.parse_args()
    sizes = [int(x) for x in args.n_list.split(",")]
    print(f"{'n':>5} {'f':>4} {'xor ops':>8} {'xor/n':>6} {'shamir ops':>11} {'shamir/(n*f)':>13}")
    for n in sizes:
        t = primary_tee(n)
        f = (n - 1) // 2
        t.ops = OpCounter()
        t.preprocessing(1)
        xor = t.ops.share_ops()
        t.ops = OpCounter()
        t.preprocessing_fallback(1)
        shamir = t.ops.share_ops(shamir=True)
        print(f"{n:>5} {f:>4} {xor:>8} {xor / n:>6.2f} {shamir:>11} {shamir / (n * f):>13.2f}")


if __name__ == "__main__":
    main()
