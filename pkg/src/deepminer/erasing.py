"""Erasing operation: channel average -> min-max normalisation -> threshold -> mask.

The mask is computed from the activations' values but treated as a constant
for differentiation; gradients flow only through the multiplication.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidThreshold, ShapeMismatch
from .tensor import Tensor, as_tensor, mul


@dataclass
class EraseMask:
    values: np.ndarray  # (N, 1, H, W), entries exactly 0.0 or 1.0
    tau: float

    @property
    def erased_fraction(self) -> np.ndarray:
        """Per-sample fraction of zeroed spatial positions."""
        flat = self.values.reshape(len(self.values), -1)
        return (flat == 0.0).sum(axis=1) / flat.shape[1]


@dataclass
class ErasedFeatureMap:
    values: Tensor
    mask: EraseMask
    saliency: np.ndarray | None = None  # normalised channel average, kept for visualisation


def channel_avg(y) -> np.ndarray:
    y = as_tensor(y)
    if y.ndim != 4:
        raise ShapeMismatch(f"expected an (N, C, H, W) feature map, got {y.shape}")
    return y.data.mean(axis=1, keepdims=True)


def min_max_norm(m: np.ndarray) -> np.ndarray:
    """Per-sample (m - min) / (max - min); a constant map normalises to zeros."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(len(m), -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(m.shape)


def erase_mask(norm: np.ndarray, tau: float) -> EraseMask:
    if not 0.0 <= tau <= 1.0:
        raise InvalidThreshold(f"tau must lie in [0, 1], got {tau}")
    norm = np.asarray(norm, dtype=np.float64)
    return EraseMask(values=np.where(norm > tau, 0.0, 1.0), tau=float(tau))


def apply_mask(y, mask: EraseMask) -> ErasedFeatureMap:
    y = as_tensor(y)
    if mask.values.shape[2:] != y.shape[2:] or mask.values.shape[0] not in (1, y.shape[0]):
        raise ShapeMismatch(f"mask {mask.values.shape} does not fit feature map {y.shape}")
    return ErasedFeatureMap(values=mul(y, mask.values), mask=mask)


def ero(y, tau: float) -> ErasedFeatureMap:
    y = as_tensor(y)
    saliency = min_max_norm(channel_avg(y))
    erased = apply_mask(y, erase_mask(saliency, tau))
    erased.saliency = saliency
    return erased
