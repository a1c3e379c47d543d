"""Run configuration: dataclasses, named presets and a flat ``key = value`` format.

Keys are ``section.field`` (e.g. ``train.lr_rm``). Lines starting with ``#``
are comments. ``to_text`` emits every key, so its output reproduces a run.
"""

import dataclasses
from dataclasses import dataclass, field

from .model import ConfigError, ModelConfig

MODES = ("joint", "single-rm", "single-fc")


@dataclass
class DataConfig:
    source: str = "synthetic"       # "synthetic" or a path to a .tns dataset / .csv manifest
    num_classes: int = 4
    per_class: int = 100
    channels: int = 1
    height: int = 32
    width: int = 32
    sigma: float = 0.25
    seed: int = 0
    train_fraction: float = 0.5
    reduce_per_class: int = 0       # drop this many training samples per class


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    a: float = 1.0                  # relation-loss weight
    b: float = 1.0                  # cross-entropy weight
    lr_embedding: float = 1e-5
    lr_fc: float = 1e-4
    lr_rm: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    mode: str = "joint"
    compute: str = "default"        # "default" (sequential, bit-exact) or "fast" (BLAS)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.compute not in ("default", "fast"):
            raise ConfigError(f"train.compute must be default or fast, got {self.compute!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        for name in ("lr_embedding", "lr_fc", "lr_rm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if not 0 < self.rho < 1:
            raise ConfigError("train.rho must lie in (0,1)")
        if self.eps <= 0:
            raise ConfigError("train.eps must be > 0")
        if self.a < 0 or self.b < 0 or self.a + self.b <= 0:
            raise ConfigError("train.a and train.b must be >= 0 with a positive sum")
        if self.mode == "single-rm" and self.a <= 0:
            raise ConfigError("train.mode single-rm needs train.a > 0")
        if self.mode == "single-fc" and self.b <= 0:
            raise ConfigError("train.mode single-fc needs train.b > 0")
        return self


@dataclass
class EvalConfig:
    rounds: int = 15
    proto_sets: int = 9
    jobs: int = 1
    exact_cutoff: int = 12


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sync_model(self):
        """Derive model geometry from the data section."""
        self.model.num_classes = self.data.num_classes
        self.model.in_channels = self.data.channels
        self.model.height = self.data.height
        self.model.width = self.data.width
        return self

    def model_for_mode(self, mode=None):
        mode = mode or self.train.mode
        cfg = dataclasses.replace(self.sync_model().model)
        cfg.rm_enabled = mode in ("joint", "single-rm")
        cfg.fc_enabled = mode in ("joint", "single-fc")
        return cfg

    def validate(self):
        self.train.validate()
        self.sync_model().model.validate()
        if self.eval.rounds < 1:
            raise ConfigError("eval.rounds must be >= 1")
        if self.eval.jobs < 1:
            raise ConfigError("eval.jobs must be >= 1")
        return self


SECTIONS = ("data", "model", "train", "eval")
# derived from the data section; not user-settable
_DERIVED = {"model.num_classes", "model.in_channels", "model.height", "model.width",
            "model.rm_enabled", "model.fc_enabled"}


def _fields(section_obj):
    return {f.name: f for f in dataclasses.fields(section_obj)}


def _coerce(key, text, current):
    kind = type(current)
    try:
        if kind is bool:
            lowered = text.strip().lower()
            if lowered not in ("true", "false", "1", "0"):
                raise ValueError
            return lowered in ("true", "1")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def set_key(cfg, key, value):
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name or key in _DERIVED:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, section)
    if name not in _fields(obj):
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(value, str):
        value = _coerce(key, value, getattr(obj, name))
    setattr(obj, name, value)


def parse_text(text, cfg=None):
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        set_key(cfg, key, value)
    return cfg


def load_file(path, cfg=None):
    with open(path) as fh:
        return parse_text(fh.read(), cfg)


def to_text(cfg):
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for name in _fields(obj):
            key = f"{section}.{name}"
            if key in _DERIVED:
                continue
            value = getattr(obj, name)
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


PRESETS = {
    # the dataclass defaults: 50 epochs, batch 32, learning rates 1e-5 / 1e-4 / 1e-3
    "default": {},
    # desk-scale acceptance task: 4 classes, 50/50 per class, from-scratch training
    "synthetic": {
        "data.num_classes": 4, "data.per_class": 100, "data.train_fraction": 0.5,
        "data.channels": 1, "data.height": 32, "data.width": 32, "data.sigma": 0.25,
        "train.epochs": 50, "train.batch_size": 32,
        "train.lr_embedding": 1e-4, "train.lr_fc": 1e-4, "train.lr_rm": 1e-3,
        "train.compute": "fast",
    },
    # tiny geometry for finite-difference checks
    "micro": {
        "data.num_classes": 3, "data.per_class": 4, "data.train_fraction": 0.5,
        "data.channels": 1, "data.height": 16, "data.width": 16, "data.sigma": 0.25,
        "model.channels": 4, "model.rm_hidden": 8, "model.fc_hidden": 8,
        "train.epochs": 2, "train.batch_size": 4,
    },
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig()
    for key, value in PRESETS[name].items():
        set_key(cfg, key, value)
    return cfg
