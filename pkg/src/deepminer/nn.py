"""Layers, the toy residual backbone block, parameter initialisation and cloning."""
from __future__ import annotations

import copy
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, ShapeMismatch
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Parameter(Tensor):
    """A trainable leaf.  ``kind`` selects the initialisation rule."""

    def __init__(self, data, kind: str):
        super().__init__(data, requires_grad=True)
        self.kind = kind


class Buffer(Tensor):
    """Non-trainable state saved with the model (running statistics, frozen shifts)."""

    def __init__(self, data, kind: str):
        super().__init__(data, requires_grad=False)
        self.kind = kind


class Module:
    """Minimal container: attributes that are Parameters, Buffers or Modules
    (or dicts/lists of Modules) are discovered in assignment order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, dict):
                for key, sub in value.items():
                    if isinstance(sub, (Tensor, Module)):
                        yield f"{name}.{key}", sub
            elif isinstance(value, list):
                for i, sub in enumerate(value):
                    if isinstance(sub, (Tensor, Module)):
                        yield f"{name}.{i}", sub

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers, depth-first in a stable order."""
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, (Parameter, Buffer)):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, t in self.named_tensors(prefix):
            if isinstance(t, Parameter):
                yield name, t

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.named_tensors())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), "conv")

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalisation over the channel axis of (N, C) or (N, C, H, W) inputs.

    With ``learn_shift=False`` the shift is a frozen buffer (used by the BNNeck).
    """

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 learn_shift: bool = True):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_features), "bn_weight")
        if learn_shift:
            self.bias = Parameter(np.zeros(num_features), "bn_bias")
        else:
            self.bias = Buffer(np.zeros(num_features), "bn_bias")
        self.running_mean = Buffer(np.zeros(num_features), "running_mean")
        self.running_var = Buffer(np.ones(num_features), "running_var")

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeMismatch(f"batchnorm over {self.num_features} channels got input {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, self.num_features) + (1,) * (x.ndim - 2)
        if self.training:
            count = x.size // self.num_features
            if count < 2:
                raise DegenerateBatch("train-mode batchnorm needs at least 2 values per channel")
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            xhat = centered / T.sqrt(var + self.eps)
            m = self.momentum
            rm, rv = self.running_mean, self.running_var
            rm.data = (1 - m) * rm.data + m * mu.data.reshape(-1)
            rv.data = (1 - m) * rv.data + m * var.data.reshape(-1) * count / (count - 1)
        else:
            mu = self.running_mean.data.reshape(bshape)
            sd = np.sqrt(self.running_var.data.reshape(bshape) + self.eps)
            xhat = (x - mu) / sd
        return xhat * self.weight.reshape(bshape) + self.bias.reshape(bshape)


def batchnorm_forward(x: Tensor, state: BatchNorm) -> Tensor:
    return state(x)


class Linear(Module):
    """Bias-free linear map ``x @ W.T``."""

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features)), "linear")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(f"linear expects {self.in_features} features, got {x.shape}")
        return x @ self.weight.T


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class ConvBlock(Module):
    """Residual block: conv3x3-BN-ReLU, conv3x3-BN, plus a skip path, then ReLU.

    The skip is a 1x1 projection conv + BN whenever channels or stride change.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, padding=1)
        self.bn2 = BatchNorm(out_channels)
        if in_channels != out_channels or stride != 1:
            self.proj = Conv2d(in_channels, out_channels, 1, stride=stride)
            self.proj_bn = BatchNorm(out_channels)
        else:
            self.proj = None
            self.proj_bn = None

    def skip(self, x: Tensor) -> Tensor:
        if self.proj is None:
            return x
        return self.proj_bn(self.proj(x))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"block expects {self.in_channels} input channels, got {x.shape}")
        main = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        return T.relu(main + self.skip(x))

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        return conv_out_extent(h, 3, self.stride, 1), conv_out_extent(w, 3, self.stride, 1)


def conv_block_forward(x: Tensor, block: ConvBlock, mode: str = "train") -> Tensor:
    block.train(mode == "train")
    return block(x)


def init_params(module: Module, seed: int) -> Module:
    """He-normal conv kernels, 1/fan_in normal classifier weights, identity BN.

    Draws happen in ``named_tensors`` order, so the result is a pure function of
    (architecture, seed).
    """
    rng = np.random.default_rng(seed)
    for _, t in module.named_tensors():
        kind = t.kind
        if kind == "conv":
            fan_in = int(np.prod(t.shape[1:]))
            t.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape)
        elif kind == "linear":
            t.data = rng.normal(0.0, np.sqrt(1.0 / t.shape[1]), size=t.shape)
        elif kind in ("bn_weight", "running_var"):
            t.data = np.ones(t.shape)
        elif kind in ("bn_bias", "running_mean", "scale", "conv_zero"):
            t.data = np.zeros(t.shape)
        else:  # pragma: no cover - every tensor kind is enumerated above
            raise ValueError(f"no init rule for {kind!r}")
        t.grad = None
    return module


def clone_block(block: Module) -> Module:
    """Value-equal copy whose parameters share no storage with the original."""
    return copy.deepcopy(block)
