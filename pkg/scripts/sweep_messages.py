"""Messages per committed request against n, next to the 5f+1 line.

    python3 scripts/sweep_messages.py --n-list 5,9,17,33,65 --seeds 3
"""

import argparse

from fastbft.cli import parse_n_list, sweep_rows


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-list", default="5,9,17,33,65")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--requests", type=int, default=5)
    args = ap.parse_args()
    rows = sweep_rows(parse_n_list(args.n_list), "none", args.seeds, args.requests)
    print(f"{'n':>4} {'f':>3} {'measured':>9} {'5f+1':>5} {'all-to-all':>11}")
    for r in rows:
        f = r["f"]
        # a classical all-to-all commit round for comparison: n^2 order
        quadratic = 2 * r["n"] * r["n"]
        print(f"{r['n']:>4} {f:>3} {r['msgs_per_request']:>9.1f} {5 * f + 1:>5} {quadratic:>11}")


if __name__ == "__main__":
    main()
