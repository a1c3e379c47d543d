"""How much does the choice of prototypes matter?  Runs the stability protocol.

    python3 scripts/prototype_sets.py --preset synthetic --sets 9 --rounds 3 --epochs 20
"""

import argparse
import os

from remarnet import config
from remarnet.evaluation import prototype_stability


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="synthetic")
    parser.add_argument("--sets", type=int, default=9)
    parser.add_argument("--rounds", type=int, default=3)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="results/stability")
    args = parser.parse_args()

    cfg = config.preset(args.preset)
    if args.epochs:
        cfg.train.epochs = args.epochs
    os.makedirs(args.out, exist_ok=True)
    report = prototype_stability(cfg, proto_sets=args.sets, rounds=args.rounds, jobs=args.jobs)
    report.write(os.path.join(args.out, "stability.csv"))
    for i, (mean, std) in enumerate(zip(report.means, report.stds)):
        print(f"set {i}: {mean:.4f} +- {std:.4f}")
    print(f"spread of set means: {report.spread:.4f}")


if __name__ == "__main__":
    main()
