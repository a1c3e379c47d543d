"""Command-line entry point: ``remarnet <subcommand> [flags]``.

Configuration is resolved in this order, later sources winning: a named
preset (``--preset``, "default" when omitted), a ``key = value`` file (``--config``),
``--set key=value`` overrides, then the dedicated flags such as ``--seed``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure (non-finite loss, failed gradient check).
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .data import DataError, save_dataset
from .evaluation import (export_embeddings, prototype_stability, run_ablation,
                         wilcoxon_signed_rank)
from .formats import FormatError
from .gradcheck import model_gradcheck
from .model import ConfigError, UsageError
from .ops import DimensionError
from .tensor import use_compute_mode
from .train import (NumericError, branch_accuracies, load_checkpoint, load_data, predict_dataset,
                    run_single, save_checkpoint, split_for_seed, write_metrics)

log = logging.getLogger("remarnet")

SUBCOMMANDS = ("gen-data", "train", "eval", "ablate", "stability", "gradcheck", "wilcoxon", "export-emb")

# flag name -> config key it overrides
FLAG_KEYS = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "mode": "train.mode",
    "compute": "train.compute",
    "data": "data.source",
    "rounds": "eval.rounds",
    "proto_sets": "eval.proto_sets",
    "jobs": "eval.jobs",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="start from a named preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=config_mod.MODES)
    p.add_argument("--compute", choices=("default", "fast"))
    p.add_argument("--data", help="dataset path (.tns or .csv manifest) instead of synthetic data")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="remarnet", description="Two-branch relation / FC small-sample classifier.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the configured synthetic dataset")
    _common(p)
    p.add_argument("--out", default="data.tns")

    p = sub.add_parser("train", help="train once; writes metrics.csv, checkpoint.tns, config.ini")
    _common(p)
    p.add_argument("--out", default="run")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="single-rm / single-fc / joint over several rounds")
    _common(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", default="ablation")

    p = sub.add_parser("stability", help="repeat the rounds protocol over several prototype sets")
    _common(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--proto-sets", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", default="stability")

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("wilcoxon", help="paired signed-rank test of two accuracy columns")
    _common(p)
    p.add_argument("--a", required=True, help="CSV or text file with one value per row")
    p.add_argument("--b", required=True)

    p = sub.add_parser("export-emb", help="write per-sample embedding features as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="embeddings.csv")
    return parser


def resolve_config(args):
    """Build the RunConfig named by preset, file, --set and flags."""
    cfg = config_mod.preset(args.preset or "default")
    if args.config:
        cfg = config_mod.load_file(args.config, cfg)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        config_mod.set_key(cfg, key.strip(), value.strip())
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            config_mod.set_key(cfg, key, value)
    return cfg.validate()


def read_column(path):
    """Numbers from the last column of a CSV; a non-numeric first row is treated as a header."""
    values = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[-1].strip():
                continue
            try:
                values.append(float(row[-1]))
            except ValueError:
                if i == 0:
                    continue
                raise DataError(f"{path}: row {i + 1}: {row[-1]!r} is not a number") from None
    if not values:
        raise DataError(f"{path}: no values")
    return np.array(values)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(cfg, args):
    if cfg.data.source != "synthetic":
        raise ConfigError("data.source: gen-data only generates synthetic data")
    ds = load_data(cfg.data)
    _ensure_parent(args.out)
    save_dataset(args.out, ds)
    print(f"wrote {args.out}: images {ds.images.shape}, {ds.num_classes} classes")
    return 0


def cmd_train(cfg, args):
    os.makedirs(args.out, exist_ok=True)
    result = run_single(cfg)
    write_metrics(os.path.join(args.out, "metrics.csv"), result.records)
    save_checkpoint(os.path.join(args.out, "checkpoint.tns"), result.net, cfg, result.protos, result.train)
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(config_mod.to_text(cfg))
    last = result.records[-1]
    print(f"epoch {last.epoch}: l_total={last.l_total:.6f} test_acc_rm={last.test_acc_rm:.4f} "
          f"test_acc_fc={last.test_acc_fc:.4f} test_acc_ens={last.test_acc_ens:.4f}")
    return 0


def _checkpoint_data(ckpt, args):
    """The dataset named by --data, else the test split the checkpoint was trained against."""
    run_cfg = ckpt.config
    if args.data:
        from .data import load_dataset
        return load_dataset(args.data), "data"
    _, test = split_for_seed(load_data(run_cfg.data), run_cfg.data, run_cfg.train.seed)
    return test, "test"


def cmd_eval(cfg, args):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.proto_images is None:
        raise ConfigError(f"{args.checkpoint}: checkpoint has no prototype images")
    ds, name = _checkpoint_data(ckpt, args)
    with use_compute_mode(cfg.train.compute):
        r, p = predict_dataset(ckpt.net, ds, ckpt.proto_images)
    acc_rm, acc_fc, acc_ens = branch_accuracies(r, p, ds.labels)
    print(f"{name}_acc_rm={acc_rm:.6f} {name}_acc_fc={acc_fc:.6f} {name}_acc_ens={acc_ens:.6f} n={len(ds)}")
    return 0


def cmd_ablate(cfg, args):
    os.makedirs(args.out, exist_ok=True)
    report = run_ablation(cfg)
    report.write(os.path.join(args.out, "ablation_rounds.csv"), os.path.join(args.out, "ablation_summary.csv"))
    for (mode, pred), (mean, std) in report.summary().items():
        print(f"{mode:9s} {pred:8s} mean={mean:.4f} std={std:.4f}")
    if report.agreement_violations:
        print(f"warning: {report.agreement_violations} samples where rm and fc agreed but the ensemble did not")
    return 0


def cmd_stability(cfg, args):
    os.makedirs(args.out, exist_ok=True)
    report = prototype_stability(cfg)
    report.write(os.path.join(args.out, "stability.csv"))
    for i, (mean, std) in enumerate(zip(report.means, report.stds)):
        print(f"set {i}: mean={mean:.4f} std={std:.4f}")
    print(f"spread={report.spread:.4f}")
    return 0


def cmd_gradcheck(cfg, args):
    report = model_gradcheck(cfg, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 3


def cmd_wilcoxon(cfg, args):
    x, y = read_column(args.a), read_column(args.b)
    if x.shape != y.shape:
        raise DataError(f"--b: {args.a} has {len(x)} values but {args.b} has {len(y)}")
    print(wilcoxon_signed_rank(x, y, cfg.eval.exact_cutoff).line())
    return 0


def cmd_export_emb(cfg, args):
    ckpt = load_checkpoint(args.checkpoint)
    ds, _ = _checkpoint_data(ckpt, args)
    _ensure_parent(args.out)
    with use_compute_mode(cfg.train.compute):
        shape = export_embeddings(ckpt.net, ds, args.out)
    print(f"wrote {args.out}: {shape[0]} rows x {shape[1]} features")
    return 0


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "stability": cmd_stability, "gradcheck": cmd_gradcheck, "wilcoxon": cmd_wilcoxon,
    "export-emb": cmd_export_emb,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(config_mod.to_text(cfg))
            return 0
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"remarnet: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"remarnet: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, FormatError, DimensionError, ValueError, OSError) as exc:
        print(f"remarnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
