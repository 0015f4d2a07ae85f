"""
Layer Modules

Parameter containers wrapping the functional operations: a minimal module tree
with named parameters, buffers and train/eval phases.
"""

import logging
from typing import Dict, Iterator, List, Tuple

import numpy as np

from eyeseg_dg.tensor import functional as F
from eyeseg_dg.tensor.autodiff import Tensor

logger = logging.getLogger(__name__)


class Module:
    """
    Base class for layers and models

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules are
    ``Module`` attributes or lists of modules. Traversal order is attribute
    insertion order, which makes parameter names stable across runs.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
        for name, child in self.children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def load_buffers(self, buffers: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, child in self.children():
            child.load_buffers(buffers, prefix=f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self) -> "Module":
        self.training = True
        for _, child in self.children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for _, child in self.children():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    """3x3 (or kxk) grouped convolution with He fan-in initialization and zero bias"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.padding = kernel_size // 2
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, (out_channels, in_channels // groups, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding, groups=self.groups)


class Normalization(Module):
    """Instance or batch normalization followed by a learned per-channel affine"""

    def __init__(self, channels: int, kind: str, eps: float = F.NORM_EPS, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.mode = F.NormalizationMode(kind=kind, eps=eps, momentum=momentum)
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        phase = "train" if self.training else "eval"
        return F.normalize(x, self.mode, phase) * self.gamma + self.beta

    def named_buffers(self, prefix: str = ""):
        if self.mode.kind == "batch" and self.mode.running_mean is not None:
            yield f"{prefix}running_mean", self.mode.running_mean.astype(np.float32)
            yield f"{prefix}running_var", self.mode.running_var.astype(np.float32)
            yield f"{prefix}batches_tracked", np.array([self.mode.batches_tracked], dtype=np.float32)

    def load_buffers(self, buffers, prefix: str = ""):
        key = f"{prefix}running_mean"
        if self.mode.kind == "batch" and key in buffers:
            self.mode.running_mean = buffers[key].astype(np.float64).reshape(-1)
            self.mode.running_var = buffers[f"{prefix}running_var"].astype(np.float64).reshape(-1)
            self.mode.batches_tracked = int(buffers[f"{prefix}batches_tracked"].reshape(-1)[0])


class ConvNormAct(Module):
    """Convolution, normalization, leaky ReLU"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int,
                 norm_kind: str, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, groups, rng, dtype)
        self.norm = Normalization(out_channels, norm_kind, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.conv(x)))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_features), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
