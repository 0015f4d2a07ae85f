"""
Differentiable Image Operations

Convolution, normalization, pooling, upsampling, activations and channel
softmax for rank-4 (batch, channel, height, width) tensors.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from eyeseg_dg.tensor.autodiff import Function, Tensor, as_tensor
from eyeseg_dg.utils.errors import NormalizationError, ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


# ===================== convolution =====================

class Conv2dFn(Function):
    """Grouped 2-D cross-correlation with zero padding"""

    def forward(self, x, w, b, stride=1, padding=0, groups=1):
        if x.ndim != 4:
            raise ShapeError(f"conv2d input must be rank 4, got shape {x.shape}")
        n, c_in, h, wd = x.shape
        c_out, c_per_group, kh, kw = w.shape
        if c_in % groups != 0:
            raise ShapeError(f"input channels {c_in} not divisible by groups {groups}")
        if c_out % groups != 0:
            raise ShapeError(f"output channels {c_out} not divisible by groups {groups}")
        if c_per_group != c_in // groups:
            raise ShapeError(f"weight in_channels/groups is {c_per_group}, expected {c_in // groups}")
        if b is not None and b.shape != (c_out,):
            raise ShapeError(f"bias shape {b.shape} does not match out_channels {c_out}")
        h_out = (h + 2 * padding - kh) // stride + 1
        w_out = (wd + 2 * padding - kw) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        # (n, c_in, h_out, w_out, kh, kw) strided view
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]

        self.meta = (x.shape, xp.shape, stride, padding, groups, h_out, w_out)
        self.windows, self.w = windows, w
        o_g = c_out // groups
        out = np.empty((n, c_out, h_out, w_out), dtype=np.result_type(x, w))
        for g in range(groups):
            win_g = windows[:, g * c_per_group:(g + 1) * c_per_group]
            w_g = w[g * o_g:(g + 1) * o_g]
            # (n, h_out, w_out, o_g)
            res = np.tensordot(win_g, w_g, axes=([1, 4, 5], [1, 2, 3]))
            out[:, g * o_g:(g + 1) * o_g] = res.transpose(0, 3, 1, 2)
        if b is not None:
            out += b[None, :, None, None]
        return out

    def backward(self, grad):
        x_shape, xp_shape, stride, padding, groups, h_out, w_out = self.meta
        w, windows = self.w, self.windows
        c_out, c_per_group, kh, kw = w.shape
        o_g = c_out // groups

        grad_w = np.empty_like(w)
        grad_xp = np.zeros(xp_shape, dtype=grad.dtype)
        for g in range(groups):
            grad_g = grad[:, g * o_g:(g + 1) * o_g]
            win_g = windows[:, g * c_per_group:(g + 1) * c_per_group]
            grad_w[g * o_g:(g + 1) * o_g] = np.tensordot(grad_g, win_g, axes=([0, 2, 3], [0, 2, 3]))
            # (n, h_out, w_out, c_per_group, kh, kw)
            cols = np.tensordot(grad_g, w[g * o_g:(g + 1) * o_g], axes=([1], [0]))
            cols = cols.transpose(0, 3, 1, 2, 4, 5)
            c0 = g * c_per_group
            for i in range(kh):
                for j in range(kw):
                    grad_xp[:, c0:c0 + c_per_group,
                            i:i + stride * h_out:stride,
                            j:j + stride * w_out:stride] += cols[..., i, j]
        if padding:
            grad_x = grad_xp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]]
        else:
            grad_x = grad_xp
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """
    Grouped 2-D convolution

    Output extents are floor((H + 2*padding - kh)/stride) + 1.

    Raises:
        ShapeError: On channel/group/weight inconsistencies, naming the dimension
    """
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0], dtype=weight.dtype))
    return Conv2dFn.apply(x, weight, bias, stride=stride, padding=padding, groups=groups)


# ===================== normalization =====================

@dataclass
class NormalizationMode:
    """
    Feature normalization kind and, for batch kind, its running statistics

    Running statistics only move during the training phase.
    """
    kind: str = "instance"
    eps: float = NORM_EPS
    momentum: float = 0.1
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    batches_tracked: int = 0

    def __post_init__(self):
        if self.kind not in ("instance", "batch"):
            raise NormalizationError(f"Unknown normalization kind: {self.kind}")
        if not self.eps > 0:
            raise NormalizationError(f"eps must be positive, got {self.eps}")


class NormalizeFn(Function):
    def forward(self, x, mode: NormalizationMode = None, phase: str = "train"):
        if x.ndim != 4:
            raise ShapeError(f"normalize expects rank-4 input, got shape {x.shape}")
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"normalize needs spatial extent >= 1, got {x.shape[2:]}")
        self.affine_only = False

        if mode.kind == "instance":
            axes = (2, 3)
        elif phase == "train":
            axes = (0, 2, 3)
        else:
            if mode.batches_tracked == 0 or mode.running_mean is None:
                raise NormalizationError("Batch normalization evaluated before any running statistics were accumulated")
            mean = mode.running_mean.reshape(1, -1, 1, 1).astype(x.dtype)
            std = np.sqrt(mode.running_var.reshape(1, -1, 1, 1) + mode.eps).astype(x.dtype)
            self.affine_only = True
            self.std = std
            return (x - mean) / std

        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        std = np.sqrt(var + mode.eps)
        y = (x - mean) / std
        self.axes, self.std, self.y = axes, std, y

        if mode.kind == "batch":
            channels = x.shape[1]
            m = mode.momentum
            batch_mean = mean.reshape(channels).astype(np.float64)
            batch_var = var.reshape(channels).astype(np.float64)
            if mode.running_mean is None:
                mode.running_mean = np.zeros(channels)
                mode.running_var = np.ones(channels)
            mode.running_mean = (1 - m) * mode.running_mean + m * batch_mean
            mode.running_var = (1 - m) * mode.running_var + m * batch_var
            mode.batches_tracked += 1
        return y

    def backward(self, grad):
        if self.affine_only:
            return (grad / self.std,)
        y, axes = self.y, self.axes
        g_mean = grad.mean(axis=axes, keepdims=True)
        gy_mean = (grad * y).mean(axis=axes, keepdims=True)
        return ((grad - g_mean - y * gy_mean) / self.std,)


def normalize(x: Tensor, mode: NormalizationMode, phase: str = "train") -> Tensor:
    """
    Standardize feature maps (no learned affine)

    Instance kind uses per-(sample, channel) statistics; batch kind uses
    per-channel batch statistics while training and running statistics in eval.

    Raises:
        NormalizationError: Eval-phase batch kind with empty running statistics
    """
    return NormalizeFn.apply(x, mode=mode, phase=phase)


# ===================== activations and resampling =====================

class LeakyReLUFn(Function):
    def forward(self, x, slope=LEAKY_SLOPE):
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return LeakyReLUFn.apply(x, slope=slope)


class AvgPool2Fn(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avg_pool2d needs even spatial extents, got {h}x{w}")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad):
        up = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3)
        return (up * 0.25,)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2"""
    return AvgPool2Fn.apply(x)


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centers, edge clamped
    out = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        out[o, lo] += 1.0 - frac
        out[o, hi] += frac
    return out


class Upsample2Fn(Function):
    def forward(self, x):
        self.uh = _bilinear_matrix(x.shape[2], x.dtype)
        self.uw = _bilinear_matrix(x.shape[3], x.dtype)
        return np.einsum("ih,nchw,jw->ncij", self.uh, x, self.uw, optimize=True)

    def backward(self, grad):
        return (np.einsum("ih,ncij,jw->nchw", self.uh, grad, self.uw, optimize=True),)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling"""
    return Upsample2Fn.apply(x)


# ===================== channel softmax =====================

class SoftmaxChannelsFn(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"softmax_channels expects rank-4 logits, got {x.shape}")
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted"""
    return SoftmaxChannelsFn.apply(logits)


class LogSoftmaxChannelsFn(Function):
    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = shifted - lse
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=1, keepdims=True),)


def log_softmax_channels(logits: Tensor) -> Tensor:
    return LogSoftmaxChannelsFn.apply(logits)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map for (batch, features) inputs; weight is (in, out)"""
    return x @ weight + bias


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def constant(value, dtype=None) -> Tensor:
    return as_tensor(value, dtype)
