"""RMSprop with per-group learning rates and the joint training loop."""

import dataclasses
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import config as config_mod
from .data import (SplitSpec, batches, generate_synthetic, load_dataset, reduce_per_class,
                   select_prototypes, stratified_split)
from .formats import load_tns, save_tns, tensor_to_text, text_to_tensor
from .model import ConfigError, ReMarNet, loss_ce, loss_rm, loss_total, predict
from .rng import derive_seed
from .tensor import backward, use_compute_mode

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch,l_rm,l_ce,l_total,train_acc_rm,train_acc_fc,train_acc_ens,"
                  "test_acc_rm,test_acc_fc,test_acc_ens")


class NumericError(RuntimeError):
    pass


def rmsprop_step(param, cache, lr, rho=0.9, eps=1e-8):
    """cache <- rho*cache + (1-rho)*g^2; value <- value - lr*g/(sqrt(cache)+eps); grad zeroed.

    Returns the new cache array.
    """
    g = param.grad
    cache = rho * cache + (1.0 - rho) * g * g
    param.data = (param.data - lr * g / (np.sqrt(cache) + eps)).astype(param.data.dtype)
    param.zero_grad()
    return cache


class RMSprop:
    def __init__(self, params, lrs, rho=0.9, eps=1e-8):
        self.params = list(params)
        self.lrs = dict(lrs)
        self.rho, self.eps = rho, eps
        self.cache = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            self.cache[i] = rmsprop_step(p, self.cache[i], self.lrs[p.group], self.rho, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class MetricsRecord:
    epoch: int
    l_rm: float
    l_ce: float
    l_total: float
    train_acc_rm: float
    train_acc_fc: float
    train_acc_ens: float
    test_acc_rm: float
    test_acc_fc: float
    test_acc_ens: float

    def csv_row(self):
        values = [str(self.epoch)] + [_fmt(v) for k, v in asdict(self).items() if k != "epoch"]
        return ",".join(values)


def _fmt(x):
    return "nan" if math.isnan(x) else repr(float(x))


def write_metrics(path, records):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


def _acc(pred, labels):
    return float(np.mean(pred == labels)) if len(labels) else math.nan


def predict_dataset(net, ds, protos_images, batch_size=64):
    """Eval-mode branch outputs over a dataset: (r or None, p or None)."""
    rs, ps = [], []
    for start in range(0, len(ds), batch_size):
        r, p = net.forward(ds.images[start:start + batch_size], protos_images, train=False)
        if r is not None:
            rs.append(r.data)
        if p is not None:
            ps.append(p.data)
    return (np.concatenate(rs) if rs else None), (np.concatenate(ps) if ps else None)


def branch_accuracies(r, p, labels):
    """Accuracy of rm-only, fc-only and ensemble predictions; nan for a missing branch."""
    acc_rm = _acc(predict(r=r), labels) if r is not None else math.nan
    acc_fc = _acc(predict(p=p), labels) if p is not None else math.nan
    acc_ens = _acc(predict(r=r, p=p), labels)
    return acc_rm, acc_fc, acc_ens


def check_mode(net, mode):
    cfg = net.config
    if mode not in config_mod.MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    if mode in ("joint", "single-rm") and not cfg.rm_enabled:
        raise ConfigError(f"mode {mode} needs the relation branch, which is disabled")
    if mode in ("joint", "single-fc") and not cfg.fc_enabled:
        raise ConfigError(f"mode {mode} needs the fc branch, which is disabled")


def fit(net, train, protos, test, cfg, on_epoch=None):
    """Train ``net`` in place and return one MetricsRecord per epoch.

    Train accuracies come from the train-mode forward passes made during the
    epoch; test accuracies from an eval-mode pass after it. A branch that is
    not trained reports loss 0 and accuracy nan.
    """
    cfg.validate()
    check_mode(net, cfg.mode)
    use_rm = cfg.mode in ("joint", "single-rm")
    use_fc = cfg.mode in ("joint", "single-fc")
    a = cfg.a if use_rm else 0.0
    b = cfg.b if use_fc else 0.0
    lrs = {"embedding": cfg.lr_embedding, "rm": cfg.lr_rm, "fc": cfg.lr_fc}
    trained = [p for p in net.parameters() if (p.group != "rm" or use_rm) and (p.group != "fc" or use_fc)]
    opt = RMSprop(trained, lrs, cfg.rho, cfg.eps)
    proto_images = protos.images(train)
    k = train.num_classes
    records = []
    with use_compute_mode(cfg.compute):
        for epoch in range(1, cfg.epochs + 1):
            sums = {"rm": 0.0, "ce": 0.0}
            train_r, train_p, train_labels = [], [], []
            shuffle_seed = derive_seed(cfg.seed, "epoch", epoch)
            for images, targets, labels in batches(train, cfg.batch_size, shuffle_seed):
                opt.zero_grad()
                r, p = net.forward(images, proto_images, train=True)
                r, p = (r if use_rm else None), (p if use_fc else None)
                l_rm = loss_rm(r, targets) if use_rm else None
                l_ce = loss_ce(p, targets) if use_fc else None
                total = loss_total(l_rm, l_ce, a if use_rm else 0.0, b if use_fc else 0.0)
                if not np.isfinite(total.data):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                backward(total)
                opt.step()
                n = len(labels)
                if l_rm is not None:
                    sums["rm"] += float(l_rm.data) * n
                if l_ce is not None:
                    sums["ce"] += float(l_ce.data) * n
                train_labels.append(labels)
                if r is not None:
                    train_r.append(r.data)
                if p is not None:
                    train_p.append(p.data)
            labels_all = np.concatenate(train_labels)
            epoch_l_rm = sums["rm"] / len(train)
            epoch_l_ce = sums["ce"] / len(train)
            tr = branch_accuracies(np.concatenate(train_r) if train_r else None,
                                   np.concatenate(train_p) if train_p else None, labels_all)
            te_r, te_p = predict_dataset(net, test, proto_images, cfg.batch_size)
            te_r, te_p = (te_r if use_rm else None), (te_p if use_fc else None)
            te = branch_accuracies(te_r, te_p, test.labels)
            rec = MetricsRecord(epoch, epoch_l_rm, epoch_l_ce, a * epoch_l_rm + b * epoch_l_ce, *tr, *te)
            records.append(rec)
            log.info("epoch %d l_total=%.4f test_ens=%.3f", epoch, rec.l_total, rec.test_acc_ens)
            if on_epoch is not None:
                on_epoch(rec)
    return records


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, net, run_cfg=None, protos=None, train=None):
    """Write parameters, BN statistics and (optionally) config and prototypes as TNS.

    Prototype images are stored next to their indices so a checkpoint can be
    evaluated without re-deriving the training split.
    """
    tensors = dict(net.state_dict())
    if run_cfg is not None:
        tensors["meta.config"] = text_to_tensor(config_mod.to_text(run_cfg))
    if protos is not None:
        tensors["meta.prototypes"] = protos.indices.astype(np.float32)
        if train is not None:
            tensors["meta.prototype_images"] = protos.images(train)
    save_tns(path, tensors)


@dataclass
class Checkpoint:
    net: ReMarNet
    config: object
    proto_indices: object = None
    proto_images: object = None


def load_checkpoint(path):
    tensors = load_tns(path)
    if "meta.config" not in tensors:
        raise ConfigError(f"{path}: checkpoint has no meta.config record")
    run_cfg = config_mod.parse_text(tensor_to_text(tensors["meta.config"]))
    net = ReMarNet(run_cfg.model_for_mode(), seed=run_cfg.train.seed)
    net.load_state_dict(tensors)
    indices = tensors.get("meta.prototypes")
    return Checkpoint(net, run_cfg, indices.astype(np.int64) if indices is not None else None,
                      tensors.get("meta.prototype_images"))


# ---------------------------------------------------------------- one full run

@dataclass
class RunResult:
    net: ReMarNet
    records: list
    protos: object
    train: object
    test: object


def load_data(data_cfg):
    """The full dataset named by a DataConfig (generated or read from disk)."""
    if data_cfg.source == "synthetic":
        return generate_synthetic(data_cfg.num_classes, data_cfg.per_class, data_cfg.channels,
                                  data_cfg.height, data_cfg.width, data_cfg.sigma, data_cfg.seed)
    return load_dataset(data_cfg.source)


def split_for_seed(full, data_cfg, seed):
    train, test = stratified_split(full, SplitSpec(data_cfg.train_fraction, seed))
    return reduce_per_class(train, data_cfg.reduce_per_class), test


def run_single(run_cfg, seed=None, mode=None, proto_seed=None, full=None):
    """Split, pick prototypes, initialise and train once.

    ``seed`` (default ``train.seed``) drives the split, the weight init and
    the shuffles; ``proto_seed`` (default ``seed``) drives prototype choice.
    """
    run_cfg.validate()
    seed = run_cfg.train.seed if seed is None else seed
    mode = mode or run_cfg.train.mode
    full = load_data(run_cfg.data) if full is None else full
    if full.images.shape[1:] != (run_cfg.data.channels, run_cfg.data.height, run_cfg.data.width):
        raise ConfigError(f"data: images have shape {full.images.shape[1:]}, config says "
                          f"{(run_cfg.data.channels, run_cfg.data.height, run_cfg.data.width)}")
    if full.num_classes != run_cfg.data.num_classes:
        raise ConfigError(f"data.num_classes is {run_cfg.data.num_classes} but the data has {full.num_classes}")
    train, test = split_for_seed(full, run_cfg.data, seed)
    protos = select_prototypes(train, seed if proto_seed is None else proto_seed)
    net = ReMarNet(run_cfg.model_for_mode(mode), seed=seed)
    tcfg = dataclasses.replace(run_cfg.train, seed=seed, mode=mode)
    records = fit(net, train, protos, test, tcfg)
    return RunResult(net, records, protos, train, test)
