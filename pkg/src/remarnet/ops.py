"""Forward ops with their backward closures.

Only what the two-branch classifier needs. No broadcasting beyond Python
scalars; shape mismatches raise ``DimensionError``.

In the default compute mode, conv2d and linear reduce sequentially in
row-major order of the reduction index, so every output equals a naive nested
loop in float32 bit for bit. Fast mode hands the same products to BLAS.
Backward passes always use BLAS.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, accumulate, compute_mode, kink_recorder, make_node


class DimensionError(ValueError):
    pass


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(b, Tensor):
        out = a.data + b
        return make_node(out, (a,), lambda g: accumulate(a, g), "add")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")

    def back(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")

    def back(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = b
        return make_node(a.data * c, (a,), lambda g: accumulate(a, g * c), "scale")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape(a, b, "mul")

    def back(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), back, "mul")


def square(x):
    return make_node(x.data * x.data, (x,), lambda g: accumulate(x, 2.0 * x.data * g), "square")


def sum_all(x):
    out = np.array(x.data.sum(), dtype=x.data.dtype)

    def back(g):
        accumulate(x, np.full(x.shape, g.reshape(()), dtype=x.data.dtype))

    return make_node(out, (x,), back, "sum")


def log_clamped(x, floor=1e-12):
    """Natural log with the input clamped below at ``floor``; no gradient where clamped."""
    safe = np.maximum(x.data, floor)

    def back(g):
        accumulate(x, np.where(x.data > floor, g / safe, 0.0))

    return make_node(np.log(safe), (x,), back, "log")


def _choice(fresh):
    recorder = kink_recorder()
    return fresh if recorder is None else recorder.record_or_replay(fresh)


def relu(x):
    mask = _choice(x.data > 0)
    return make_node(x.data * mask, (x,), lambda g: accumulate(x, g * mask), "relu")


def sigmoid(x):
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    # keep scores strictly inside (0, 1) even where the dtype saturates
    info = np.finfo(z.dtype)
    out = np.clip(out, info.tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)))
    return make_node(out, (x,), lambda g: accumulate(x, g * out * (1.0 - out)), "sigmoid")


def softmax_rows(x):
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        accumulate(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return make_node(out, (x,), back, "softmax")


def activation(x, kind):
    fn = {"relu": relu, "sigmoid": sigmoid, "softmax-rows": softmax_rows}.get(kind)
    if fn is None:
        raise ValueError(f"unknown activation {kind!r}")
    return fn(x)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: accumulate(x, g.reshape(old)), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def concat_channels(a, b):
    """Stack ``a`` then ``b`` along the channel axis (axis 1)."""
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[1]

    def back(g):
        accumulate(a, g[:, :c1])
        accumulate(b, g[:, c1:])

    return make_node(np.concatenate([a.data, b.data], axis=1), (a, b), back, "concat")


def slice_channels(x, start, stop):
    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        accumulate(x, full)

    return make_node(np.ascontiguousarray(x.data[:, start:stop]), (x,), back, "slice_channels")


def slice_rows(x, start, stop):
    def back(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        accumulate(x, full)

    return make_node(x.data[start:stop], (x,), back, "slice")


def repeat_rows(x, k):
    """Each row repeated ``k`` times in place: rows a,b -> a,a,b,b for k=2."""
    n = x.shape[0]

    def back(g):
        accumulate(x, g.reshape((n, k) + x.shape[1:]).sum(axis=1))

    return make_node(np.repeat(x.data, k, axis=0), (x,), back, "repeat")


def tile_rows(x, n):
    """The whole row block tiled ``n`` times: rows a,b -> a,b,a,b for n=2."""
    k = x.shape[0]

    def back(g):
        accumulate(x, g.reshape((n, k) + x.shape[1:]).sum(axis=0))

    reps = (n,) + (1,) * (x.ndim - 1)
    return make_node(np.tile(x.data, reps), (x,), back, "tile")


# ---------------------------------------------------------------- matmul kernels

def _sequential_matmul(a, b):
    """a[P,R] @ b[R,Q] accumulated strictly in order r = 0..R-1."""
    dtype = np.result_type(a, b)
    at = np.ascontiguousarray(a.T, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    tmp = np.empty_like(acc)
    for r in range(at.shape[0]):
        np.multiply(at[r][:, None], b[r], out=tmp)
        np.add(acc, tmp, out=acc)
    return acc


def matmul(a, b):
    if compute_mode() == "fast":
        return a @ b
    return _sequential_matmul(a, b)


def linear(x, w, b):
    """x[B,F] @ w[F,G] + b[G]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = matmul(x.data, w.data) + b.data

    def back(g):
        accumulate(x, g @ w.data.T)
        accumulate(w, x.data.T @ g)
        accumulate(b, g.sum(axis=0))

    return make_node(out, (x, w, b), back, "linear")


# ---------------------------------------------------------------- convolution

def _im2col(xpad, k, stride, ho, wo):
    n, c = xpad.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xpad.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xpad[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols, xpad_shape, k, stride, ho, wo):
    n, c = xpad_shape[:2]
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dx = np.zeros(xpad_shape, dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += \
                dcols[:, ki, kj].transpose(1, 0, 2, 3)
    return dx


def conv2d(x, w, b, stride=1, padding=1):
    """Zero-padded 2-D cross-correlation, NCHW input, weight [Cout, Cin, k, k]."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k < 1:
        raise DimensionError(f"conv2d: kernel must be square and >= 1, got {k}x{k2}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} filters")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise DimensionError(f"conv2d: padded input {h}x{wd} (+{padding}) smaller than kernel {k}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xpad, k, stride, ho, wo)
    w2 = w.data.reshape(cout, -1)
    out2 = matmul(w2, cols) + b.data[:, None]
    out = np.ascontiguousarray(out2.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        accumulate(w, g2 @ cols.T)
        accumulate(b, g2.sum(axis=1))
        if x.requires_grad:
            dpad = _col2im(w2.T @ g2, xpad.shape, k, stride, ho, wo)
            accumulate(x, dpad[:, :, padding:padding + h, padding:padding + wd])

    return make_node(out, (x, w, b), back, "conv2d")


# ---------------------------------------------------------------- pooling

def _first_max_masks(corners, out):
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for corner in corners:
        hit = (corner == out) & ~taken
        masks.append(hit)
        taken |= hit
    return masks


def maxpool2x2(x):
    """Disjoint 2x2 max pooling; ties resolve to the first window element in row-major order."""
    if x.ndim != 4:
        raise DimensionError("maxpool2x2 expects a 4-D input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
    corners = [x.data[:, :, di::2, dj::2] for di, dj in offsets]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    recorder = kink_recorder()
    hits = None
    if recorder is not None:
        hits = recorder.record_or_replay(_first_max_masks(corners, out))
        if recorder.replaying:
            out = sum(np.where(hit, corner, 0.0) for hit, corner in zip(hits, corners)).astype(out.dtype)

    def back(g):
        masks = hits if hits is not None else _first_max_masks(corners, out)
        routed = np.zeros_like(x.data)
        for (di, dj), hit in zip(offsets, masks):
            routed[:, :, di::2, dj::2] = np.where(hit, g, 0.0)
        accumulate(x, routed)

    return make_node(out, (x,), back, "maxpool")


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormStats:
    """Running statistics owned by one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, momentum=0.1):
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32), momentum)


def batchnorm2d(x, gamma, beta, stats, train, eps=1e-5):
    """Per-channel normalization over (batch, height, width).

    Train mode uses the biased batch variance and folds the batch moments into
    ``stats`` with its momentum; eval mode normalizes with ``stats``.
    """
    if x.ndim != 4:
        raise DimensionError("batchnorm2d expects a 4-D input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params must have shape ({c},)")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 1:
        raise DimensionError("batchnorm2d: empty batch")
    dtype = x.data.dtype
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = stats.momentum
        stats.running_mean = ((1 - m) * stats.running_mean + m * mean).astype(np.float32)
        stats.running_var = ((1 - m) * stats.running_var + m * var).astype(np.float32)
    else:
        mean = stats.running_mean.astype(dtype)
        var = stats.running_var.astype(dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        accumulate(gamma, (g * xhat).sum(axis=axes))
        accumulate(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if train:
            s1 = gx.sum(axis=axes)[None, :, None, None]
            s2 = (gx * xhat).sum(axis=axes)[None, :, None, None]
            dx = inv_std[None, :, None, None] / count * (count * gx - s1 - xhat * s2)
        else:
            dx = gx * inv_std[None, :, None, None]
        accumulate(x, dx)

    return make_node(out, (x, gamma, beta), back, "batchnorm")
