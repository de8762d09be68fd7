import numpy as np
import pytest

from deepminer.errors import ShapeMismatch
from deepminer.nn import Parameter
from deepminer.optim import Adam, adam_step, lr_schedule
from deepminer.training import TrainConfig


def adam_reference(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_matches_reference_loop():
    r = np.random.default_rng(0)
    for _ in range(5):
        x0 = r.normal(size=(3, 4))
        grads = [r.normal(size=(3, 4)) for _ in range(50)]
        p = Parameter(x0.copy(), "linear")
        opt = Adam([p])
        for g in grads:
            adam_step([p], [g], opt, 1e-3)
        np.testing.assert_allclose(p.data, adam_reference(x0, grads, 1e-3), rtol=0, atol=1e-12)
        assert opt.step_count == 50


def test_zero_gradient_and_hand_step():
    p = Parameter(np.array([2.0]), "linear")
    opt = Adam([p])
    opt.step(0.1, [np.zeros(1)])
    assert p.data[0] == 2.0 and opt.step_count == 1
    q = Parameter(np.array([0.0]), "linear")
    Adam([q]).step(0.1, [np.ones(1)])
    assert abs(q.data[0] + 0.1) < 1e-8


def test_uses_param_grads_and_checks_shapes():
    p = Parameter(np.ones(2), "linear")
    p.grad = np.ones(2)
    opt = Adam([p])
    opt.step(0.1)
    assert np.all(p.data < 1)
    opt.zero_grad()
    assert p.grad is None
    with pytest.raises(ShapeMismatch):
        opt.step(0.1, [np.ones(3)])
    with pytest.raises(ShapeMismatch):
        opt.step(0.1, [])


def test_schedule_values():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 3.5e-5
    assert lr_schedule(10, cfg) == 3.5e-4
    assert lr_schedule(40, cfg) == 3.5e-5
    assert lr_schedule(70, cfg) == 3.5e-6
    assert lr_schedule(5, cfg) == 1.925e-4
    assert lr_schedule(39, cfg) == 3.5e-4 and lr_schedule(119, cfg) == 3.5e-6
    lrs = [lr_schedule(e, cfg) for e in range(11)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
