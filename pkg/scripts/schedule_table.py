"""Worst schedule margin per step r for several delta values, as CSV on stdout."""
import argparse
import csv
import sys

from nlrs.solver import schedule_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--deltas", type=float, nargs="+", default=[1e-12, 1e-6, 1e-3, 1e-1, 0.5])
    ap.add_argument("--M", type=float, default=10.0)
    ap.add_argument("--nu", type=float, default=0.125)
    ap.add_argument("--r-max", type=int, default=30)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["delta", "r", "min_margin", "holds_through_r"])
    for delta in args.deltas:
        rep = schedule_check(delta, args.M, args.nu, r_max=args.r_max)
        ok = True
        for r, entry in enumerate(rep.margins, start=1):
            worst = min(entry["margins"])
            ok &= worst >= 0
            w.writerow([delta, r, f"{worst:.6g}", ok])


if __name__ == "__main__":
    main()
