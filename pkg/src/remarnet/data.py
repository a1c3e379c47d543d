"""Datasets, the synthetic generator, splitting, prototypes and batching.

Every randomized function here is a pure function of its inputs and seed.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .formats import FormatError, load_pnm, load_tns, save_tns
from .rng import Xoshiro256


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray                  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray                  # [N] int64 in 0..K-1
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.class_names:
            k = int(self.labels.max()) + 1 if self.labels.size else 0
            self.class_names = [f"class{j}" for j in range(k)]

    def validate(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if not np.all(np.isfinite(self.images)):
            raise DataError("images contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside 0..K-1")
        missing = [j for j in range(self.num_classes) if not np.any(self.labels == j)]
        if missing:
            raise DataError(f"classes without samples: {missing}")
        return self

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], list(self.class_names))

    def class_indices(self, k):
        return np.flatnonzero(self.labels == k)


@dataclass
class PrototypeSet:
    indices: np.ndarray     # indices[j] is a sample of class j
    seed: int

    def images(self, ds):
        return ds.images[self.indices]


@dataclass
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0


def one_hot(labels, k):
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _box_blur(img, size=4):
    """Mean over the size x size window anchored at each pixel, wrapping at the edges."""
    acc = np.zeros_like(img)
    for di in range(size):
        for dj in range(size):
            acc += np.roll(img, shift=(-di, -dj), axis=(-2, -1))
    return acc / (size * size)


def generate_synthetic(num_classes, per_class, channels, height, width, sigma, seed):
    """Noisy copies of per-class blurred-noise templates.

    Template k is uniform(0,1) pixel noise passed through a wrapping 4x4 box
    filter; each sample is clamp(template + N(0, sigma^2), 0, 1). Samples are
    stored class by class.
    """
    if num_classes < 1 or channels < 1 or height < 1 or width < 1:
        raise DataError("generate_synthetic: K, C, H and W must be positive")
    if height % 4 or width % 4:
        raise DataError(f"generate_synthetic: H and W must be divisible by 4, got {height}x{width}")
    if per_class < 2:
        raise DataError("generate_synthetic: per_class must be >= 2")
    if sigma < 0:
        raise DataError("generate_synthetic: sigma must be >= 0")
    pixels = channels * height * width
    template_rng = Xoshiro256.stream(seed, "synthetic.templates")
    noise_rng = Xoshiro256.stream(seed, "synthetic.noise")
    images = np.empty((num_classes * per_class, channels, height, width), dtype=np.float32)
    for k in range(num_classes):
        raw = template_rng.uniform_array(pixels).reshape(channels, height, width)
        template = _box_blur(raw)
        for s in range(per_class):
            noise = noise_rng.normal_array(pixels).reshape(channels, height, width)
            images[k * per_class + s] = np.clip(template + sigma * noise, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(images, labels, [f"class{k}" for k in range(num_classes)])


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_indices(ds, spec):
    """Per-class shuffled stratified split; returns sorted (train, test) index arrays."""
    if not 0 < spec.train_fraction < 1:
        raise DataError(f"train_fraction must lie in (0,1), got {spec.train_fraction}")
    rng = Xoshiro256.stream(spec.seed, "split")
    train, test = [], []
    for k in range(ds.num_classes):
        members = ds.class_indices(k)
        n_train = _round_half_up(spec.train_fraction * len(members))
        if n_train < 1 or n_train > len(members) - 1:
            raise DataError(f"class {k} has {len(members)} samples; too few to split at {spec.train_fraction}")
        order = members[rng.permutation(len(members))]
        train.append(order[:n_train])
        test.append(order[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_split(ds, spec):
    train_idx, test_idx = split_indices(ds, spec)
    return ds.subset(train_idx), ds.subset(test_idx)


def reduce_per_class(ds, n):
    """Drop the first ``n`` samples of every class, keeping at least one each."""
    if n <= 0:
        return ds
    keep = []
    for k in range(ds.num_classes):
        members = ds.class_indices(k)
        if len(members) - n < 1:
            raise DataError(f"cannot remove {n} samples from class {k} of size {len(members)}")
        keep.append(members[n:])
    return ds.subset(np.sort(np.concatenate(keep)))


def select_prototypes(train, seed):
    rng = Xoshiro256.stream(seed, "prototypes")
    picks = []
    for k in range(train.num_classes):
        members = train.class_indices(k)
        if len(members) == 0:
            raise DataError(f"class {k} has no training sample to use as prototype")
        picks.append(members[rng.randbelow(len(members))])
    return PrototypeSet(np.array(picks, dtype=np.int64), seed)


def batches(ds, batch_size, shuffle_seed):
    """Yield (images, one-hot targets, labels) over one shuffled epoch; the last batch may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = Xoshiro256.stream(shuffle_seed, "shuffle").permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        labels = ds.labels[idx]
        yield ds.images[idx], one_hot(labels, ds.num_classes), labels


# ---------------------------------------------------------------- persistence

def save_dataset(path, ds):
    save_tns(path, {"images": ds.images, "labels": ds.labels.astype(np.float32)})


def load_dataset(path):
    """Load a dataset from a TNS file (``images`` + ``labels``) or a ``path,label`` CSV manifest."""
    if str(path).endswith(".csv"):
        return load_manifest(path)
    tensors = load_tns(path)
    for key in ("images", "labels"):
        if key not in tensors:
            raise FormatError(key, f"dataset file lacks a {key!r} tensor")
    return Dataset(tensors["images"], tensors["labels"].astype(np.int64)).validate()


def _load_image(path):
    if str(path).endswith(".tns"):
        tensors = load_tns(path)
        if len(tensors) != 1:
            raise FormatError("entries", f"{path}: image TNS must hold exactly one tensor")
        return next(iter(tensors.values()))
    return load_pnm(path)


def load_manifest(path):
    """CSV with header ``path,label``; labels are class indices or class names (sorted)."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise FormatError("header", f"manifest header must be 'path,label', got {header!r}")
        rows = [(r[0].strip(), r[1].strip()) for r in reader if r]
    if not rows:
        raise DataError("manifest lists no images")
    raw_labels = [label for _, label in rows]
    if all(label.lstrip("-").isdigit() for label in raw_labels):
        labels = [int(label) for label in raw_labels]
        names = [f"class{k}" for k in range(max(labels) + 1)]
    else:
        names = sorted(set(raw_labels))
        labels = [names.index(label) for label in raw_labels]
    images = [_load_image(p if os.path.isabs(p) else os.path.join(base, p)) for p, _ in rows]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"manifest images have differing shapes: {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(labels), names).validate()
