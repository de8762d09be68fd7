import numpy as np
import pytest

from deepminer.model import ModelConfig, build_model
from deepminer.tensor import Tensor, no_grad


class Kink(Exception):
    """A finite-difference probe straddled a non-differentiable point."""


def check_grads(f, tensors, eps=1e-5, max_coords=None, rng=None, kink_tol=1e-3):
    """Max relative error between autodiff and central differences.

    ``f`` takes no arguments and reads ``tensors`` (leaves with
    ``requires_grad``).  A probe whose one-sided slopes disagree is treated as
    a kink and raises ``Kink`` so the caller can redraw the input.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    ad = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    with no_grad():
        f0 = f().item()
    worst = 0.0
    for t, g in zip(tensors, ad):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            if abs((up - f0) - (f0 - down)) / eps > kink_tol * max(1.0, abs(fd)):
                raise Kink(f"coordinate {i}")
            worst = max(worst, abs(g.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
    return worst


def check_grads_resampling(make, tries=10, **kw):
    """``make(rng)`` returns (f, tensors); redraw until no probe hits a kink."""
    for attempt in range(tries):
        f, tensors = make(np.random.default_rng(attempt))
        try:
            return check_grads(f, tensors, rng=np.random.default_rng(1000 + attempt), **kw)
        except Kink:
            continue
    raise AssertionError("every draw hit a kink")


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


TINY = dict(block_widths=(16, 16, 16, 16), image_height=16, image_width=8)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_identities=3, **TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
