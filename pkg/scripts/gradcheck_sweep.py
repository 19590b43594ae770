"""Worst-case finite-difference error per gradient case over many seeds.

    python scripts/gradcheck_sweep.py --seeds 20 --out runs/gradcheck.csv
"""
import argparse
import csv
import sys
from pathlib import Path

from fceyolo.gradcheck import gradient_cases, run_case


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--group", default="all", choices=("all", "ops", "fce"))
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    rows = []
    for name in gradient_cases(args.group):
        errs = [run_case(name, s) for s in range(args.seeds)]
        worst = max(errs)
        rows.append((name, worst, errs.index(worst)))
        print(f"{name:<20}{worst:>11.3e}  seed {errs.index(worst)}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case", "max_rel_error", "worst_seed"])
            w.writerows((n, f"{e:.6e}", s) for n, e, s in rows)
    worst = max(r[1] for r in rows)
    print(f"overall worst {worst:.3e} (tolerance {args.tol:g})")
    sys.exit(0 if worst < args.tol else 1)


if __name__ == "__main__":
    main()
