"""Adam and the warm-up / step-decay learning-rate schedule."""
from __future__ import annotations

from decimal import Decimal
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors (no weight decay)."""

    def __init__(self, params: Sequence, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"{len(grads)} gradients for {len(self.params)} parameters")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient {g.shape} for parameter {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state: Adam, lr: float) -> Adam:
    state.step(lr, grads)
    return state


def _dec(x) -> Decimal:
    # shortest repr, so 3.5e-4 * 0.1 lands exactly on 3.5e-5
    return Decimal(repr(float(x)))


def lr_schedule(epoch: int, cfg) -> float:
    """Linear warm-up from ``warmup_start`` to ``base_lr``, then a cumulative
    ``decay_factor`` at each epoch in ``decay_epochs``.

    Arithmetic is done in decimal so configured round numbers come out exact.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    base, start = _dec(cfg.base_lr), _dec(cfg.warmup_start)
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return float(start + (base - start) * Decimal(epoch) / Decimal(cfg.warmup_epochs))
    n_decays = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return float(base * _dec(cfg.decay_factor) ** n_decays)
