"""Spatial (SAM) and channel (CHAM) attention; ``Attention`` applies CHAM after SAM."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ChannelNotDivisible, ShapeMismatch
from .nn import BatchNorm, Conv2d, Module, Parameter
from .tensor import Tensor


def _check_map(y: Tensor, channels: int, divisor: int, name: str) -> None:
    if y.ndim != 4 or y.shape[1] != channels:
        raise ShapeMismatch(f"{name} over {channels} channels got input {y.shape}")
    if channels % divisor:
        raise ChannelNotDivisible(f"{name} needs channels divisible by {divisor}, got {channels}")


class SpatialAttention(Module):
    """Position affinity ``softmax(A^T B)`` re-weights every channel map.

    Output is ``y + gamma * BN(context)``; gamma starts at 0, so a freshly
    initialised module is the identity.
    """

    def __init__(self, channels: int):
        if channels % 8:
            raise ChannelNotDivisible(f"SAM needs channels divisible by 8, got {channels}")
        self.channels = channels
        self.conv_a = Conv2d(channels, channels // 8, 1)
        self.conv_b = Conv2d(channels, channels // 8, 1)
        self.bn = BatchNorm(channels)
        self.gamma = Parameter(np.zeros(1), "scale")

    def affinity(self, y: Tensor) -> Tensor:
        """Row-stochastic (N, D, D) matrix; row i is a distribution over source positions."""
        _check_map(y, self.channels, 8, "SAM")
        n, _, h, w = y.shape
        d, r = h * w, self.channels // 8
        a = self.conv_a(y).reshape(n, r, d).transpose(0, 2, 1)
        b = self.conv_b(y).reshape(n, r, d)
        return T.softmax(a @ b, axis=-1)

    def forward(self, y: Tensor) -> Tensor:
        y = T.as_tensor(y)
        f = self.affinity(y)
        n, c, h, w = y.shape
        context = (y.reshape(n, c, h * w) @ f.transpose(0, 2, 1)).reshape(n, c, h, w)
        return y + self.gamma * self.bn(context)


class ChannelAttention(Module):
    """Squeeze-and-excitation style gate without the global pooling: a softmax
    over channels at every spatial position multiplies the input."""

    def __init__(self, channels: int):
        if channels % 16:
            raise ChannelNotDivisible(f"CHAM needs channels divisible by 16, got {channels}")
        self.channels = channels
        self.conv_down = Conv2d(channels, channels // 16, 1)
        self.conv_up = Conv2d(channels // 16, channels, 1)
        # zero init: the gate starts uniform (1/C), a pure rescale absorbed by the next BN
        self.conv_up.weight.kind = "conv_zero"

    def gate(self, y: Tensor) -> Tensor:
        _check_map(y, self.channels, 16, "CHAM")
        return T.softmax(self.conv_up(T.relu(self.conv_down(y))), axis=1)

    def forward(self, y: Tensor) -> Tensor:
        y = T.as_tensor(y)
        return y * self.gate(y)


class Attention(Module):
    def __init__(self, channels: int):
        self.sam = SpatialAttention(channels)
        self.cham = ChannelAttention(channels)

    def forward(self, y: Tensor) -> Tensor:
        return self.cham(self.sam(y))


def _set_mode(module: Module, mode: str) -> None:
    module.train(mode == "train")


def sam_forward(y, p: SpatialAttention, mode: str = "train") -> Tensor:
    _set_mode(p, mode)
    return p(y)


def cham_forward(y, p: ChannelAttention) -> Tensor:
    return p(y)


def att(y, sam: SpatialAttention, cham: ChannelAttention, mode: str = "train") -> Tensor:
    return cham_forward(sam_forward(y, sam, mode), cham)
