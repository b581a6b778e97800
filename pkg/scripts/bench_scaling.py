"""Matching time against needle count.

Writes a CSV (same columns as ``needleloc bench``) and prints a table plus
a log-log slope estimate for the matrix build and the greedy/merge solve.

    python scripts/bench_scaling.py --needles 5..60 --repeats 3 --out out/bench
"""

import argparse
import csv
import math
from pathlib import Path

import numpy as np

from needleloc.cli import BENCH_FIELDS, bench_rows, parse_needles
from needleloc.config import PipelineConfig


def loglog_slope(ns, ts):
    ns, ts = np.asarray(ns, float), np.asarray(ts, float)
    keep = ts > 0
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ns[keep]), np.log(ts[keep]), 1)[0])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--needles", default="5..50")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/bench")
    args = ap.parse_args()

    cfg = PipelineConfig(seed=args.seed).synced()
    rows = bench_rows(cfg, parse_needles(args.needles), args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "scaling.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)

    print(f"{'n':>4} {'tips':>5} {'feasible':>9} {'build ms':>9} {'solve ms':>9} {'status':>14} {'f1':>6}")
    for r in rows:
        print(
            f"{r['n_needles']:>4} {r['n_tips']:>5} {r['n_feasible']:>9} {r['build_s'] * 1e3:>9.2f} "
            f"{r['solve_s'] * 1e3:>9.2f} {r['status']:>14} {r['f1']:>6.3f}"
        )
    ns = [r["n_needles"] for r in rows]
    print(f"log-log slope: build {loglog_slope(ns, [r['build_s'] for r in rows]):.2f}, "
          f"solve {loglog_slope(ns, [r['solve_s'] for r in rows]):.2f}")
    print(f"wrote {out / 'scaling.csv'}")


if __name__ == "__main__":
    main()
