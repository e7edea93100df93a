"""Frozen vs unfrozen vision encoder on the seed-0, 50-example corpus.

Usage: python scripts/ablation_freeze.py [--epochs N] [--seed S] [--csv PATH]
"""

import argparse
import csv
from dataclasses import asdict

from peftlab.experiments import format_table, freeze_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args()
    rows = freeze_ablation(args.epochs, args.seed)
    print(format_table(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
            w.writeheader()
            w.writerows(asdict(r) for r in rows)


if __name__ == "__main__":
    main()
