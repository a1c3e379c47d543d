"""Two-branch classifier: shared conv embedding, a relation module scoring
(sample, prototype) pairs, and a fully connected softmax branch.

Parameters are grouped as ``embedding``, ``rm`` and ``fc`` so the optimizer
can give each sub-network its own learning rate.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import BatchNormStats, DimensionError
from .rng import Xoshiro256
from .tensor import Parameter, Tensor, compute_mode


class UsageError(RuntimeError):
    """A branch was asked for something it cannot provide (e.g. disabled)."""


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    height: int = 32
    width: int = 32
    channels: int = 64          # filters per conv block
    embed_blocks: int = 4
    pooled_blocks: int = 2      # leading embedding blocks followed by 2x2 pooling
    rm_blocks: int = 2
    rm_hidden: int = 32
    fc_hidden: int = 32
    rm_enabled: bool = True
    fc_enabled: bool = True

    def validate(self):
        if not (self.rm_enabled or self.fc_enabled):
            raise ConfigError("model: at least one of rm_enabled/fc_enabled must be true")
        for name in ("in_channels", "num_classes", "height", "width", "channels",
                     "embed_blocks", "rm_hidden", "fc_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0 <= self.pooled_blocks <= self.embed_blocks:
            raise ConfigError("model.pooled_blocks must lie in [0, embed_blocks]")
        factor = 2 ** (self.pooled_blocks + self.rm_blocks)
        if self.height % factor or self.width % factor:
            raise ConfigError(f"model: image size {self.height}x{self.width} must be divisible by {factor}")

    @property
    def feature_shape(self):
        f = 2 ** self.pooled_blocks
        return (self.channels, self.height // f, self.width // f)


def _fan_in_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape).astype(np.float32)


class ConvBlock:
    """3x3 conv (padding 1) -> batch norm -> ReLU, optionally -> 2x2 max pool."""

    def __init__(self, cin, cout, pool, group, rng):
        self.pool = pool
        self.weight = Parameter(_fan_in_uniform(rng, (cout, cin, 3, 3), cin * 9), group)
        self.bias = Parameter(np.zeros(cout), group)
        self.gamma = Parameter(np.ones(cout), group)
        self.beta = Parameter(np.zeros(cout), group)
        self.stats = BatchNormStats.fresh(cout)

    def __call__(self, x, train):
        return self.finish(ops.conv2d(x, self.weight, self.bias, stride=1, padding=1), train)

    def finish(self, y, train):
        y = ops.relu(ops.batchnorm2d(y, self.gamma, self.beta, self.stats, train))
        return ops.maxpool2x2(y) if self.pool else y

    def paired(self, a, p, train):
        """Same as calling the block on every concat(a_i, p_j), row i*K + j.

        The convolution is linear in its input channels, so each half of the
        kernel is applied once per sample / prototype and the results summed.
        """
        c = a.shape[1]
        bsz, k = a.shape[0], p.shape[0]
        zero = Tensor(np.zeros(self.bias.shape, dtype=self.bias.data.dtype))
        ya = ops.conv2d(a, ops.slice_channels(self.weight, 0, c), self.bias, stride=1, padding=1)
        yp = ops.conv2d(p, ops.slice_channels(self.weight, c, 2 * c), zero, stride=1, padding=1)
        return self.finish(ops.add(ops.repeat_rows(ya, k), ops.tile_rows(yp, bsz)), train)

    def named_parameters(self, prefix):
        yield f"{prefix}.conv.weight", self.weight
        yield f"{prefix}.conv.bias", self.bias
        yield f"{prefix}.bn.gamma", self.gamma
        yield f"{prefix}.bn.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.bn.running_mean", self.stats, "running_mean"
        yield f"{prefix}.bn.running_var", self.stats, "running_var"


class Linear:
    def __init__(self, fin, fout, group, rng):
        self.weight = Parameter(_fan_in_uniform(rng, (fin, fout), fin), group)
        self.bias = Parameter(np.zeros(fout), group)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class EmbeddingModule:
    def __init__(self, cfg, rng):
        self.blocks = []
        cin = cfg.in_channels
        for i in range(cfg.embed_blocks):
            self.blocks.append(ConvBlock(cin, cfg.channels, i < cfg.pooled_blocks, "embedding", rng))
            cin = cfg.channels
        self.in_channels = cfg.in_channels
        self.downsample = 2 ** cfg.pooled_blocks

    def __call__(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"embed: expected [B,{self.in_channels},H,W], got {x.shape}")
        if x.shape[2] % self.downsample or x.shape[3] % self.downsample:
            raise DimensionError(f"embed: spatial dims {x.shape[2:]} not divisible by {self.downsample}")
        for block in self.blocks:
            x = block(x, train)
        return x


class RelationModule:
    def __init__(self, cfg, rng):
        c, h, w = cfg.feature_shape
        self.blocks = [ConvBlock(2 * c, c, True, "rm", rng)]
        self.blocks += [ConvBlock(c, c, True, "rm", rng) for _ in range(cfg.rm_blocks - 1)]
        shrink = 2 ** cfg.rm_blocks
        self.fc1 = Linear(c * (h // shrink) * (w // shrink), cfg.rm_hidden, "rm", rng)
        self.fc2 = Linear(cfg.rm_hidden, 1, "rm", rng)

    def __call__(self, sample_features, proto_features, train):
        """Relation score for every pair, flattened sample-major: row i*K + j."""
        sf, pf = sample_features, proto_features
        if compute_mode() == "fast":
            x = self.blocks[0].paired(sf, pf, train)
        else:
            b, k = sf.shape[0], pf.shape[0]
            x = self.blocks[0](ops.concat_channels(ops.repeat_rows(sf, k), ops.tile_rows(pf, b)), train)
        for block in self.blocks[1:]:
            x = block(x, train)
        x = ops.relu(self.fc1(ops.flatten(x)))
        return ops.sigmoid(self.fc2(x))


class FCBranch:
    def __init__(self, cfg, rng):
        c, h, w = cfg.feature_shape
        self.hidden = Linear(c * h * w, cfg.fc_hidden, "fc", rng)
        self.out = Linear(cfg.fc_hidden, cfg.num_classes, "fc", rng)

    def __call__(self, features):
        x = ops.relu(self.hidden(ops.flatten(features)))
        return ops.softmax_rows(self.out(x))


class ReMarNet:
    """Embedding + relation module + FC branch.

    All three sub-networks are always built (so checkpoints have one layout);
    the branch flags decide which ones take part in forward passes.
    """

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.config = cfg
        rng = Xoshiro256.stream(seed, "init")
        self.embedding = EmbeddingModule(cfg, rng)
        self.rm = RelationModule(cfg, rng)
        self.fc = FCBranch(cfg, rng)

    # -- bookkeeping

    def named_parameters(self):
        for i, block in enumerate(self.embedding.blocks):
            yield from block.named_parameters(f"embedding.block{i}")
        for i, block in enumerate(self.rm.blocks):
            yield from block.named_parameters(f"rm.block{i}")
        yield from self.rm.fc1.named_parameters("rm.fc1")
        yield from self.rm.fc2.named_parameters("rm.fc2")
        yield from self.fc.hidden.named_parameters("fc.hidden")
        yield from self.fc.out.named_parameters("fc.out")

    def parameters(self, group=None):
        return [p for _, p in self.named_parameters() if group is None or p.group == group]

    def _named_buffers(self):
        for i, block in enumerate(self.embedding.blocks):
            yield from block.named_buffers(f"embedding.block{i}")
        for i, block in enumerate(self.rm.blocks):
            yield from block.named_buffers(f"rm.block{i}")

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, stats, attr in self._named_buffers():
            state[name] = getattr(stats, attr).copy()
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise ConfigError(f"checkpoint is missing {name}")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise DimensionError(f"checkpoint {name}: shape {arr.shape}, model expects {p.shape}")
            p.data = arr.copy()
            p.zero_grad()
        for name, stats, attr in self._named_buffers():
            if name not in state:
                raise ConfigError(f"checkpoint is missing {name}")
            setattr(stats, attr, np.asarray(state[name], dtype=np.float32).copy())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward pieces

    def embed(self, images, train=False):
        return self.embedding(_tensor(images), train)

    def relation_scores(self, sample_features, proto_features, train=False):
        """Score every (sample, prototype) pair: result[i, j] in (0, 1)."""
        if not self.config.rm_enabled:
            raise UsageError("relation branch is disabled")
        sf, pf = sample_features, proto_features
        if sf.shape[1:] != pf.shape[1:]:
            raise DimensionError(f"relation_scores: sample features {sf.shape} vs prototypes {pf.shape}")
        return ops.reshape(self.rm(sf, pf, train), (sf.shape[0], pf.shape[0]))

    def fc_probs(self, sample_features, train=False):
        if not self.config.fc_enabled:
            raise UsageError("fc branch is disabled")
        return self.fc(sample_features)

    def forward(self, images, proto_images, train=False):
        """Return (relation scores or None, class probabilities or None).

        Samples and prototypes go through the embedding as one batch, so in
        train mode they share batch-norm statistics.
        """
        images, proto_images = _tensor(images), _tensor(proto_images)
        n = images.shape[0]
        if self.config.rm_enabled:
            both = Tensor(np.concatenate([images.data, proto_images.data], axis=0))
            feats = self.embed(both, train)
            sf = ops.slice_rows(feats, 0, n)
            pf = ops.slice_rows(feats, n, feats.shape[0])
            r = self.relation_scores(sf, pf, train)
        else:
            sf = self.embed(images, train)
            r = None
        p = self.fc_probs(sf, train) if self.config.fc_enabled else None
        return r, p


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------- losses

def _check_pair(a, y, name):
    if a.shape != y.shape or a.ndim != 2:
        raise DimensionError(f"{name}: prediction {a.shape} and target {y.shape} must match and be 2-D")


def loss_rm(r, y):
    """(1/B) * sum over samples and classes of (r - y)^2."""
    y = _tensor(y)
    _check_pair(r, y, "loss_rm")
    return ops.mul(ops.sum_all(ops.square(ops.sub(r, y))), 1.0 / r.shape[0])


def loss_ce(p, y, floor=1e-12):
    """-(1/B) * sum_i y_i . log p_i, with log clamped at ``floor``."""
    y = _tensor(y)
    _check_pair(p, y, "loss_ce")
    return ops.mul(ops.sum_all(ops.mul(y, ops.log_clamped(p, floor))), -1.0 / p.shape[0])


def loss_total(l_rm, l_ce, a=1.0, b=1.0):
    """a * l_rm + b * l_ce. Either loss may be None when its weight is unused."""
    if a < 0 or b < 0 or a + b <= 0:
        raise ConfigError(f"loss weights must be non-negative with a positive sum (a={a}, b={b})")
    terms = []
    if l_rm is not None:
        terms.append(ops.mul(l_rm, a))
    if l_ce is not None:
        terms.append(ops.mul(l_ce, b))
    if not terms:
        raise ConfigError("loss_total needs at least one branch loss")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def predict(r=None, p=None):
    """argmax_j (r_ij + p_ij); a missing branch counts as zeros; ties go to the lowest index."""
    if r is None and p is None:
        raise UsageError("predict needs at least one branch output")
    arrays = [np.asarray(x.data if isinstance(x, Tensor) else x) for x in (r, p) if x is not None]
    if len(arrays) == 2 and arrays[0].shape != arrays[1].shape:
        raise DimensionError(f"predict: shapes {arrays[0].shape} and {arrays[1].shape} differ")
    total = arrays[0] if len(arrays) == 1 else arrays[0] + arrays[1]
    return np.argmax(total, axis=1)  # argmax returns the first maximal index
