"""Differentiable neural primitives used by the routing networks.

Fixed set: depthwise 3x3 convolution (padding 1, stride 1 or 2), 1x1
convolution (stride 1 or 2), batch normalization, ReLU, tanh, x2 bilinear
upsampling (half-pixel centers, edge-clamped), stride-4 average pooling and
global average pooling.  Convolutions carry no bias; batch norm absorbs it.

All spatial resamplers are expressed as separable linear maps (a row matrix
and a column matrix applied via matmul), which makes their backward passes
exact transposes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import engine
from .engine import Tensor, record
from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization state."""

    gamma: Tensor                 # (1, C, 1, 1)
    beta: Tensor                  # (1, C, 1, 1)
    running_mean: np.ndarray      # (C,)
    running_var: np.ndarray       # (C,)
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @property
    def channels(self):
        return self.gamma.data.shape[1]


def make_batch_norm(channels, trainable=True):
    return BatchNormParams(
        gamma=engine.constant((1, channels, 1, 1), 1.0, requires_grad=trainable),
        beta=engine.zeros((1, channels, 1, 1), requires_grad=trainable),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )


@dataclass
class SepConvParams:
    """Depthwise 3x3 + pointwise 1x1 + batch norm (+ ReLU when applied)."""

    depthwise: Tensor             # (C, 1, 3, 3)
    pointwise: Tensor             # (C_out, C, 1, 1)
    bn: BatchNormParams
    stride: int = 1

    @property
    def in_channels(self):
        return self.depthwise.data.shape[0]

    @property
    def out_channels(self):
        return self.pointwise.data.shape[0]


def make_sepconv(c_in, c_out, seed, stride=1):
    """He-style normal init for both convolution stages."""
    dw_std = np.sqrt(2.0 / 9.0)
    pw_std = np.sqrt(2.0 / c_in)
    return SepConvParams(
        depthwise=engine.normal((c_in, 1, 3, 3), seed=seed, std=dw_std, requires_grad=True),
        pointwise=engine.normal((c_out, c_in, 1, 1), seed=seed + 1, std=pw_std, requires_grad=True),
        bn=make_batch_norm(c_out),
        stride=stride,
    )


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv1x1(x, w, stride=1):
    """1x1 convolution.  stride 2 samples the even (top-left aligned) grid."""
    if stride not in (1, 2):
        raise ShapeError(f"conv1x1 stride must be 1 or 2, got {stride}")
    if w.data.ndim != 4 or w.data.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 weight must be (C_out, C_in, 1, 1), got {w.shape}")
    c_out, c_in = w.data.shape[:2]
    if x.data.shape[1] != c_in:
        raise ShapeError(f"conv1x1: input has {x.data.shape[1]} channels, weight expects {c_in}")

    if stride == 1:
        def fwd(xd, wd):
            return np.einsum("oc,bchw->bohw", wd[:, :, 0, 0], xd, optimize=True)

        def bwd(g):
            wd = w.data[:, :, 0, 0]
            gx = np.einsum("oc,bohw->bchw", wd, g, optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)
            return gx, gw.reshape(w.data.shape)

        return record("conv1x1", [x, w], fwd, bwd)

    def fwd(xd, wd):
        return np.einsum("oc,bchw->bohw", wd[:, :, 0, 0], xd[:, :, ::2, ::2], optimize=True)

    def bwd(g):
        wd = w.data[:, :, 0, 0]
        gx = np.zeros_like(x.data)
        gx[:, :, ::2, ::2] = np.einsum("oc,bohw->bchw", wd, g, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, x.data[:, :, ::2, ::2], optimize=True)
        return gx, gw.reshape(w.data.shape)

    return record("conv1x1s2", [x, w], fwd, bwd)


def depthwise3x3(x, k, stride=1):
    """Depthwise 3x3 convolution, padding 1.  Kernel shape (C, 1, 3, 3)."""
    if stride not in (1, 2):
        raise ShapeError(f"depthwise3x3 stride must be 1 or 2, got {stride}")
    if k.data.ndim != 4 or k.data.shape[1:] != (1, 3, 3):
        raise ShapeError(f"depthwise kernel must be (C, 1, 3, 3), got {k.shape}")
    c = k.data.shape[0]
    if x.data.shape[1] != c:
        raise ShapeError(f"depthwise3x3: input has {x.data.shape[1]} channels, kernel {c}")
    _, _, h, w_ = x.data.shape
    h_out = -(-h // stride)
    w_out = -(-w_ // stride)

    def fwd(xd, kd):
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((xd.shape[0], c, h_out, w_out))
        for i in range(3):
            for j in range(3):
                tap = xp[:, :, i:i + 1 + stride * (h_out - 1):stride,
                             j:j + 1 + stride * (w_out - 1):stride]
                out += kd[:, 0, i, j][None, :, None, None] * tap
        return out

    def bwd(g):
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gk = np.zeros_like(k.data)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                rows = slice(i, i + 1 + stride * (h_out - 1), stride)
                cols = slice(j, j + 1 + stride * (w_out - 1), stride)
                gk[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, rows, cols],
                                           optimize=True)
                gxp[:, :, rows, cols] += k.data[:, 0, i, j][None, :, None, None] * g
        return gxp[:, :, 1:h + 1, 1:w_ + 1], gk

    return record("depthwise3x3", [x, k], fwd, bwd)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x, p, mode):
    """Batch normalization.

    train: normalize with batch statistics over (B, H, W) per channel, then
    update running stats by exponential moving average.  infer: use running
    stats.  Both apply gamma and beta.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    if x.data.shape[1] != p.channels:
        raise ShapeError(f"batch_norm: {x.data.shape[1]} channels vs params {p.channels}")

    if mode == "infer":
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        shift = p.running_mean

        def fwd(xd, gd, bd):
            return gd * ((xd - shift[None, :, None, None]) * inv[None, :, None, None]) + bd

        def bwd(g):
            xhat = (x.data - shift[None, :, None, None]) * inv[None, :, None, None]
            gx = g * p.gamma.data * inv[None, :, None, None]
            gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gb = g.sum(axis=(0, 2, 3), keepdims=True)
            return gx, gg, gb

        return record("batch_norm[infer]", [x, p.gamma, p.beta], fwd, bwd)

    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    state = {}

    def fwd(xd, gd, bd):
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
        state["mean"], state["inv"], state["xhat"] = mean, inv, xhat
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var
        return gd * xhat + bd

    def bwd(g):
        inv, xhat = state["inv"], state["xhat"]
        gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        gxhat = g * p.gamma.data
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = inv[None, :, None, None] * (gxhat - s1 / n - xhat * s2 / n)
        return gx, gg, gb

    return record("batch_norm[train]", [x, p.gamma, p.beta], fwd, bwd)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _bilinear_matrix(n):
    """(2n, n) interpolation matrix: half-pixel centers, edges clamped."""
    m = np.zeros((2 * n, n))
    for j in range(2 * n):
        src = (j + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[j, lo] += 1.0 - t
        m[j, hi] += t
    return m


@lru_cache(maxsize=64)
def _avgpool_matrix(n, k):
    """(ceil(n/k), n) mean-pooling matrix with edge-clipped windows."""
    n_out = -(-n // k)
    m = np.zeros((n_out, n))
    for o in range(n_out):
        lo, hi = k * o, min(k * o + k, n)
        m[o, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(x, rows, cols, name):
    """Apply y = rows @ x @ cols.T along the spatial axes; exact transpose backward."""

    def fwd(xd):
        return np.matmul(np.matmul(rows, xd), cols.T)

    def bwd(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return record(name, [x], fwd, bwd)


def bilinear_upsample_x2(x):
    """(B, C, H, W) -> (B, C, 2H, 2W), align-corners disabled."""
    _, _, h, w = x.data.shape
    return _separable(x, _bilinear_matrix(h), _bilinear_matrix(w), "bilinear_up2")


def avg_pool(x, k=4):
    """kxk mean pooling with stride k, ceil mode, edge windows clipped."""
    _, _, h, w = x.data.shape
    return _separable(x, _avgpool_matrix(h, k), _avgpool_matrix(w, k), f"avg_pool{k}")


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C, 1, 1) spatial mean."""
    _, _, h, w = x.data.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool needs non-empty spatial dims")
    n = h * w

    def fwd(xd):
        return xd.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return record("global_avg_pool", [x], fwd, bwd)


# ---------------------------------------------------------------------------
# Composite blocks and loss
# ---------------------------------------------------------------------------

def sepconv3x3(x, p, mode="train"):
    """Depthwise 3x3 -> pointwise 1x1 -> batch norm -> ReLU."""
    if x.data.shape[1] != p.in_channels:
        raise ShapeError(f"sepconv3x3: input channels {x.data.shape[1]} "
                         f"!= params {p.in_channels}")
    y = depthwise3x3(x, p.depthwise, stride=p.stride)
    y = conv1x1(y, p.pointwise)
    y = batch_norm(y, p.bn, mode)
    return engine.relu(y)


def softmax_cross_entropy(logits, target):
    """Mean per-pixel cross entropy.

    logits: (B, K, H, W); target: (B, H, W) integer class map in [0, K).
    Returns a scalar (1, 1, 1, 1) tensor.
    """
    b, k, h, w = logits.data.shape
    tgt = np.asarray(target)
    if tgt.shape != (b, h, w):
        raise ShapeError(f"target shape {tgt.shape} != {(b, h, w)}")
    if tgt.min() < 0 or tgt.max() >= k:
        from .errors import DataError
        raise DataError(f"target classes must lie in [0, {k})")
    n = b * h * w
    onehot_idx = tgt[:, None, :, :]

    def fwd(z):
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
        picked = np.take_along_axis(z, onehot_idx, axis=1)
        return ((lse - picked).sum() / n).reshape(1, 1, 1, 1)

    def bwd(g):
        z = logits.data
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        soft = ez / ez.sum(axis=1, keepdims=True)
        picked = np.take_along_axis(soft, onehot_idx, axis=1)
        np.put_along_axis(soft, onehot_idx, picked - 1.0, axis=1)
        return (soft * (g.reshape(()) / n),)

    return record("softmax_ce", [logits], fwd, bwd)
