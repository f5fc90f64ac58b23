"""Differentiable operators.

Only what the fusion architectures need: 3D convolution, batch norm,
channel-broadcast add/mul, ReLU, global average pooling, affine layers,
weighted cross-entropy, plus the few helpers the gated baseline uses
(sigmoid, tanh, concat, scale/shift).

Volumetric tensors use the layout batch x channel x depth x height x width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DataError
from .tensor import Tensor, check_finite


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values per spatial axis, got {v}")
    return v


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.kernel.ndim != 5 or min(self.kernel.shape) < 1:
            raise ConfigError(f"kernel must be 5-axis with positive extents, got {self.kernel.shape}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"bad stride {self.stride} / padding {self.padding}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ConfigError("bias must have one entry per output channel")


def conv_output_shape(size: Sequence[int], kernel: Sequence[int], stride, padding) -> tuple[int, ...]:
    stride, padding = _triple(stride), _triple(padding)
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(size, kernel, stride, padding))


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    if x.ndim != 5:
        raise ConfigError(f"conv3d expects a 5-axis input, got shape {x.shape}")
    w = p.kernel
    cout, cin, kd, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ConfigError(f"conv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    for n, pad, k in zip(x.shape[2:], p.padding, (kd, kh, kw)):
        if n + 2 * pad < k:
            raise ConfigError(f"conv3d: spatial extent {x.shape[2:]} too small for kernel {(kd, kh, kw)}")
    sd, sh, sw = p.stride
    pd, ph, pw = p.padding
    B = x.shape[0]
    Do, Ho, Wo = conv_output_shape(x.shape[2:], (kd, kh, kw), p.stride, p.padding)
    nk = kd * kh * kw

    # Work channels-last: im2col columns are ordered (kd, kh, kw, cin) so the
    # col2im scatter in backward moves contiguous runs of cin values. The
    # returned tensor is a channel-first view of channels-last memory, which
    # the next conv consumes without a copy.
    xcl = x.data.transpose(0, 2, 3, 4, 1)
    if pd or ph or pw:
        xcl = np.pad(xcl, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    padded_shape = xcl.shape
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, nk * cin)

    if nk == 1:
        cols = np.ascontiguousarray(xcl[:, :sd * Do:sd, :sh * Ho:sh, :sw * Wo:sw, :]).reshape(-1, cin)
    else:
        win = sliding_window_view(xcl, (kd, kh, kw), axis=(1, 2, 3))
        win = win[:, :sd * Do:sd, :sh * Ho:sh, :sw * Wo:sw]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(B * Do * Ho * Wo, nk * cin)
    out = cols @ wmat.T
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(B, Do, Ho, Wo, cout).transpose(0, 4, 1, 2, 3)
    check_finite(out, "conv3d", force=True)

    need_x = x.requires_grad

    def backward(g: np.ndarray):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, kd, kh, kw, cin).transpose(0, 4, 1, 2, 3)
        gb = g2.sum(axis=0) if p.bias is not None else None
        gx = None
        if need_x:
            dcols = (g2 @ wmat).reshape(B, Do, Ho, Wo, nk, cin)
            gxcl = np.zeros(padded_shape, dtype=dcols.dtype)
            i = 0
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxcl[:, a:a + sd * Do:sd, b:b + sh * Ho:sh, c:c + sw * Wo:sw, :] += dcols[:, :, :, :, i, :]
                        i += 1
            gxcl = gxcl[:, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4], :]
            gx = gxcl.transpose(0, 4, 1, 2, 3)
        return (gx, np.ascontiguousarray(gw), gb)

    parents = (x, w) if p.bias is None else (x, w, p.bias)
    return Tensor._from_op(out, parents, backward, "conv3d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


_BN_AXES = (0, 2, 3, 4)


def batchnorm3d(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode the batch statistics are used and the running
    estimates move toward them by ``momentum`` (the variance estimate is
    the unbiased one). Inference mode uses the running estimates.
    """
    if x.ndim != 5:
        raise ConfigError(f"batchnorm3d expects a 5-axis input, got shape {x.shape}")
    C = x.shape[1]
    if C != s.channels:
        raise ConfigError(f"batchnorm3d: input has {C} channels, state has {s.channels}")
    bshape = (1, C, 1, 1, 1)
    gamma = s.gamma.data.reshape(bshape)
    beta = s.beta.data.reshape(bshape)

    if s.training:
        m = x.size // C
        mean = x.data.mean(axis=_BN_AXES, keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=_BN_AXES, keepdims=True)
        invstd = 1.0 / np.sqrt(var + s.eps)
        xhat = xc * invstd
        out = xhat * gamma + beta
        unbiased = var.reshape(C) * (m / max(m - 1, 1))
        mom = s.momentum
        s.running_mean[...] = (1 - mom) * s.running_mean + mom * mean.reshape(C)
        s.running_var[...] = (1 - mom) * s.running_var + mom * unbiased

        def backward(g: np.ndarray):
            gbeta = g.sum(axis=_BN_AXES)
            ggamma = (g * xhat).sum(axis=_BN_AXES)
            gx = None
            if x.requires_grad:
                dxhat = g * gamma
                sum_d = dxhat.sum(axis=_BN_AXES, keepdims=True)
                sum_dx = (dxhat * xhat).sum(axis=_BN_AXES, keepdims=True)
                gx = (invstd / m) * (m * dxhat - sum_d - xhat * sum_dx)
            return (gx, ggamma, gbeta)
    else:
        rmean = s.running_mean.reshape(bshape)
        invstd = (1.0 / np.sqrt(s.running_var + s.eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - rmean) * invstd
        out = xhat * gamma + beta

        def backward(g: np.ndarray):
            gx = g * (gamma * invstd) if x.requires_grad else None
            return (gx, (g * xhat).sum(axis=_BN_AXES), g.sum(axis=_BN_AXES))

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, s.gamma, s.beta), backward, "batchnorm3d")


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def _check_pointwise(a: Tensor, b: Tensor, kind: str) -> bool:
    """Return True when ``b`` is a single-channel map broadcast across ``a``'s channels."""
    if a.shape == b.shape:
        return False
    if a.ndim == 5 and b.ndim == 5 and b.shape[1] == 1 and a.shape[:1] + a.shape[2:] == b.shape[:1] + b.shape[2:]:
        return True
    raise ConfigError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_pointwise(a, b, "add")

    def backward(g):
        gb = g.sum(axis=1, keepdims=True) if bcast else g
        return (g, gb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_pointwise(a, b, "mul")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bcast:
                gb = gb.sum(axis=1, keepdims=True)
        return (ga, gb)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "relu")


def pointwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if b is None:
        raise ConfigError(f"pointwise {kind!r} needs two operands")
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ConfigError(f"unknown pointwise kind {kind!r}")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def scale_shift(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` with constant scalars."""
    out = a.data * a.dtype.type(scale) + a.dtype.type(shift)
    return Tensor._from_op(out, (a,), lambda g: (g * a.dtype.type(scale),), "scale_shift")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(t.shape[i] != base[i] for i in range(len(base)) if i != axis):
            raise ConfigError(f"concat: incompatible shapes {base} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return Tensor._from_op(out, tensors, backward, "concat")


def reduce_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reduce_mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


# ---------------------------------------------------------------------------
# pooling / affine / loss
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ConfigError(f"global_avg_pool expects a 5-axis input, got shape {x.shape}")
    B, C = x.shape[:2]
    vol = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.reshape(B, C, vol).mean(axis=2)

    def backward(g):
        return (np.broadcast_to((g / vol).reshape(B, C, 1, 1, 1), x.shape).astype(x.dtype),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ConfigError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward, "linear")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Batch mean of ``w[y] * -log softmax(logits)[y]``.

    Note the plain mean over the batch: weights scale each sample's
    contribution and are not renormalized by their sum.
    """
    if logits.ndim != 2:
        raise ConfigError(f"logits must be batch x classes, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise ConfigError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise DataError(f"label out of range [0, {K})")
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (K,):
        raise ConfigError(f"expected {K} class weights, got {w.shape}")
    w = w.astype(logits.dtype)

    logp = log_softmax(logits.data)
    rows = np.arange(B)
    sw = w[labels]
    out = np.asarray(-(sw * logp[rows, labels]).sum() / B, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (sw[:, None] * (g / B)),)

    return Tensor._from_op(out, (logits,), backward, "weighted_cross_entropy")
