"""Ablation over rounds, then signed-rank tests of the joint ensemble against each single-branch cell.

    python3 scripts/ablation_study.py --preset synthetic --rounds 15 --epochs 20
"""

import argparse
import os

from remarnet import config
from remarnet.evaluation import DegenerateSample, run_ablation, wilcoxon_signed_rank


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="synthetic")
    parser.add_argument("--rounds", type=int, default=15)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--reduce", type=int, default=0, help="training samples removed per class")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="results/ablation")
    args = parser.parse_args()

    cfg = config.preset(args.preset)
    cfg.data.reduce_per_class = args.reduce
    if args.epochs:
        cfg.train.epochs = args.epochs
    os.makedirs(args.out, exist_ok=True)
    report = run_ablation(cfg, rounds=args.rounds, jobs=args.jobs)
    report.write(os.path.join(args.out, "ablation_rounds.csv"), os.path.join(args.out, "ablation_summary.csv"))

    for (mode, pred), (mean, std) in report.summary().items():
        print(f"{mode:9s} {pred:8s} {mean:.4f} +- {std:.4f}")
    ours = report.values[("joint", "ensemble")]
    for cell, accs in report.values.items():
        if cell == ("joint", "ensemble"):
            continue
        try:
            line = wilcoxon_signed_rank(ours, accs).line()
        except DegenerateSample:
            line = "identical per-round accuracies"
        print(f"ensemble vs {cell[0]}/{cell[1]}: {line}")


if __name__ == "__main__":
    main()
