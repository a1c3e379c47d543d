"""Evaluation: accuracy, the ablation and prototype-set protocols, and the signed-rank test.

Also exports embedding features to CSV for external plotting.
"""

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import predict
from .rng import derive_seed, splitmix64
from .tensor import use_compute_mode
from .train import load_data, predict_dataset, run_single

# (training mode, prediction source) cells of an ablation report
CELLS = (("single-rm", "rm"), ("single-fc", "fc"),
         ("joint", "rm"), ("joint", "fc"), ("joint", "ensemble"))


class DegenerateSample(ValueError):
    pass


def accuracy(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"accuracy: {pred.shape} predictions vs {truth.shape} labels")
    if pred.size == 0:
        raise ValueError("accuracy of an empty label list")
    return float(np.count_nonzero(pred == truth)) / pred.size


def round_seed(run_seed, index):
    return splitmix64(run_seed, index)


# ---------------------------------------------------------------- Wilcoxon

@dataclass
class WilcoxonResult:
    n: int
    w_plus: float
    w_minus: float
    p: float
    method: str

    def line(self):
        return f"n={self.n} W+={self.w_plus:g} p={self.p:.6g} method={self.method}"


def average_ranks(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks, w_plus):
    # Ranks are multiples of 0.5, so doubled ranks give exact integer sums.
    doubled = np.rint(2 * ranks).astype(np.int64)
    n = len(doubled)
    signs = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
    sums = signs @ doubled
    w = int(round(2 * w_plus))
    total = float(1 << n)
    lower = np.count_nonzero(sums <= w) / total
    upper = np.count_nonzero(sums >= w) / total
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(ranks, w_plus, abs_d):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(abs_d, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(x, y, exact_cutoff=12):
    """Paired two-sided signed-rank test of x against y.

    Zero differences are dropped; tied |d| get average ranks. Up to
    ``exact_cutoff`` nonzero pairs the null distribution is enumerated over
    all 2^n sign patterns, beyond that a tie- and continuity-corrected
    normal approximation is used.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"wilcoxon: samples have lengths {len(x)} and {len(y)}")
    d = x - y
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateSample("degenerate sample: all differences are zero")
    abs_d = np.abs(d)
    ranks = average_ranks(abs_d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    n = int(d.size)
    if n <= exact_cutoff:
        return WilcoxonResult(n, w_plus, w_minus, _exact_p(ranks, w_plus), "exact")
    return WilcoxonResult(n, w_plus, w_minus, _normal_p(ranks, w_plus, abs_d), "normal-approx")


def wilcoxon_bruteforce_p(d):
    """Reference p-value by listing every sign pattern; for tests and small n."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    ranks = average_ranks(np.abs(d))
    observed = float(ranks[d > 0].sum())
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    lower = sum(s <= observed + 1e-9 for s in sums) / len(sums)
    upper = sum(s >= observed - 1e-9 for s in sums) / len(sums)
    return min(1.0, 2 * min(lower, upper))


# ---------------------------------------------------------------- ablation

@dataclass
class AblationReport:
    rounds: int
    values: dict = field(default_factory=dict)      # (mode, prediction) -> per-round test accuracy
    agreement_violations: int = 0                   # joint rounds where rm == fc but ensemble differs

    def summary(self):
        out = {}
        for cell, accs in self.values.items():
            arr = np.asarray(accs, dtype=np.float64)
            out[cell] = (float(arr.mean()), float(arr.std()))
        return out

    def write(self, rows_path, summary_path):
        with open(rows_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode", "prediction", "round", "test_acc"])
            for (mode, pred), accs in self.values.items():
                for r, acc in enumerate(accs):
                    writer.writerow([mode, pred, r, repr(float(acc))])
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode", "prediction", "mean", "std"])
            for (mode, pred), (mean, std) in self.summary().items():
                writer.writerow([mode, pred, repr(mean), repr(std)])


def _ablation_round(args):
    run_cfg, index = args
    seed = round_seed(run_cfg.train.seed, index)
    full = load_data(run_cfg.data)
    out, violations = {}, 0
    for mode in ("single-rm", "single-fc", "joint"):
        result = run_single(run_cfg, seed=seed, mode=mode, full=full)
        with use_compute_mode(run_cfg.train.compute):
            r, p = predict_dataset(result.net, result.test, result.protos.images(result.train))
        labels = result.test.labels
        if mode == "single-rm":
            out[("single-rm", "rm")] = accuracy(predict(r=r), labels)
        elif mode == "single-fc":
            out[("single-fc", "fc")] = accuracy(predict(p=p), labels)
        else:
            rm_pred, fc_pred, ens_pred = predict(r=r), predict(p=p), predict(r=r, p=p)
            out[("joint", "rm")] = accuracy(rm_pred, labels)
            out[("joint", "fc")] = accuracy(fc_pred, labels)
            out[("joint", "ensemble")] = accuracy(ens_pred, labels)
            agree = rm_pred == fc_pred
            violations = int(np.count_nonzero(ens_pred[agree] != rm_pred[agree]))
    return out, violations


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_ablation(run_cfg, rounds=None, jobs=None):
    """Single-RM, Single-FC and joint training on each round's fresh split/prototypes/init."""
    rounds = run_cfg.eval.rounds if rounds is None else rounds
    jobs = run_cfg.eval.jobs if jobs is None else jobs
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    report = AblationReport(rounds, {cell: [] for cell in CELLS})
    for out, violations in _map(_ablation_round, [(run_cfg, i) for i in range(rounds)], jobs):
        for cell in CELLS:
            report.values[cell].append(out[cell])
        report.agreement_violations += violations
    return report


# ---------------------------------------------------------------- prototype stability

@dataclass
class StabilityReport:
    proto_seeds: list
    accuracies: list            # per set, per round joint ensemble test accuracy

    @property
    def means(self):
        return [float(np.mean(a)) for a in self.accuracies]

    @property
    def stds(self):
        return [float(np.std(a)) for a in self.accuracies]

    @property
    def spread(self):
        return max(self.means) - min(self.means)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["proto_set", "proto_seed", "mean", "std"])
            for i, (seed, mean, std) in enumerate(zip(self.proto_seeds, self.means, self.stds)):
                writer.writerow([i, seed, repr(mean), repr(std)])


def _stability_cell(args):
    run_cfg, proto_seed, index = args
    seed = round_seed(run_cfg.train.seed, index)
    result = run_single(run_cfg, seed=seed, mode="joint", proto_seed=proto_seed)
    return result.records[-1].test_acc_ens


def prototype_stability(run_cfg, proto_sets=None, rounds=None, proto_seeds=None, jobs=None):
    """Repeat the joint rounds protocol once per prototype set.

    Rounds share their split and init seeds across sets, so only the choice
    of prototypes differs between sets.
    """
    rounds = run_cfg.eval.rounds if rounds is None else rounds
    jobs = run_cfg.eval.jobs if jobs is None else jobs
    if proto_seeds is None:
        proto_sets = run_cfg.eval.proto_sets if proto_sets is None else proto_sets
        proto_seeds = [derive_seed(run_cfg.train.seed, "proto-set", s) for s in range(proto_sets)]
    if len(proto_seeds) < 2:
        raise ValueError("prototype stability needs at least 2 prototype sets")
    tasks = [(run_cfg, ps, i) for ps in proto_seeds for i in range(rounds)]
    accs = _map(_stability_cell, tasks, jobs)
    per_set = [accs[s * rounds:(s + 1) * rounds] for s in range(len(proto_seeds))]
    return StabilityReport(list(proto_seeds), per_set)


# ---------------------------------------------------------------- embeddings

def export_embeddings(net, ds, path, batch_size=64):
    """Write ``label,f0..f{D-1}``: one row per sample with its flattened eval-mode features."""
    chunks = []
    for start in range(0, len(ds), batch_size):
        chunks.append(net.embed(ds.images[start:start + batch_size], train=False).data.reshape(
            min(batch_size, len(ds) - start), -1))
    feats = np.concatenate(chunks)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["label"] + [f"f{i}" for i in range(feats.shape[1])]) + "\n")
        for label, row in zip(ds.labels, feats):
            fh.write(f"{int(label)}," + ",".join(f"{v:.9g}" for v in row.tolist()) + "\n")
    return feats.shape
