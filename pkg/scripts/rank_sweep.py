"""LoRA rank sweep on the diffusion denoiser: trainable count and probe loss per rank.

Also prints the closed-form reduction table for square d x d projections.

Usage: python scripts/rank_sweep.py [--ranks 1 2 4 8 16] [--epochs N]
"""

import argparse

from peftlab.experiments import format_table, rank_sweep, reduction_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("| d | r | full | lora | reduction |\n|---|---|---|---|---|")
    for d, r, full, lora, red in reduction_table():
        print(f"| {d} | {r} | {full} | {lora} | {red:.4f} |")
    print()
    rows = rank_sweep(args.ranks, seed=args.seed, pretrain_steps=args.pretrain_steps, epochs=args.epochs)
    print(format_table(rows))


if __name__ == "__main__":
    main()
