import numpy as np
import pytest

from deepminer.attention import Attention, ChannelAttention, SpatialAttention, att, cham_forward, sam_forward
from deepminer.errors import ChannelNotDivisible
from deepminer.nn import init_params
from deepminer.tensor import Tensor

from conftest import check_grads_resampling, leaf
from oracles import cham_loops, randomise_module as _randomise, sam_loops


@pytest.mark.parametrize("train", [True, False])
def test_sam_matches_loops(rng, train):
    p = _randomise(SpatialAttention(16), rng)
    y = rng.normal(size=(2, 16, 3, 2))
    out = sam_forward(Tensor(y), p, "train" if train else "eval").data
    np.testing.assert_allclose(out, sam_loops(y, p, train), rtol=0, atol=1e-12)


def test_sam_affinity_rows_are_distributions(rng):
    p = _randomise(SpatialAttention(8), rng)
    f = p.affinity(Tensor(rng.normal(size=(2, 8, 3, 3)))).data
    assert f.shape == (2, 9, 9)
    np.testing.assert_allclose(f.sum(axis=2), 1.0, rtol=1e-14)


def test_cham_matches_loops(rng):
    p = _randomise(ChannelAttention(32), rng)
    y = rng.normal(size=(2, 32, 3, 2))
    np.testing.assert_allclose(cham_forward(Tensor(y), p).data, cham_loops(y, p), rtol=0, atol=1e-12)


def test_sam_identity_at_zero_gamma(rng):
    p = init_params(SpatialAttention(16), 3)
    assert p.gamma.data[0] == 0.0
    y = rng.normal(size=(2, 16, 3, 3))
    np.testing.assert_array_equal(p(Tensor(y)).data, y)


def test_fresh_cham_gate_is_uniform(rng):
    p = init_params(ChannelAttention(16), 3)
    y = rng.normal(size=(2, 16, 3, 3))
    np.testing.assert_allclose(p.gate(Tensor(y)).data, 1.0 / 16, rtol=1e-14)


def test_att_composes_cham_after_sam(rng):
    m = Attention(16)
    _randomise(m, rng)
    y = rng.normal(size=(2, 16, 2, 2))
    expected = cham_loops(sam_loops(y, m.sam, True), m.cham)
    np.testing.assert_allclose(att(Tensor(y), m.sam, m.cham).data, expected, atol=1e-12)
    np.testing.assert_allclose(m(Tensor(y)).data, expected, atol=1e-12)


def test_channel_divisibility():
    with pytest.raises(ChannelNotDivisible):
        SpatialAttention(12)
    with pytest.raises(ChannelNotDivisible):
        ChannelAttention(24)


def test_sam_gradients():
    def make(r):
        p = _randomise(SpatialAttention(8), r)
        y = leaf(r.normal(size=(2, 8, 2, 2)))
        w = r.normal(size=(2, 8, 2, 2))
        return (lambda: (p(y) * w).sum()), [y] + p.parameters()

    assert check_grads_resampling(make) <= 1e-4


def test_cham_gradients():
    def make(r):
        p = _randomise(ChannelAttention(16), r)
        y = leaf(r.normal(size=(2, 16, 2, 2)))
        w = r.normal(size=(2, 16, 2, 2))
        return (lambda: (p(y) * w).sum()), [y] + p.parameters()

    assert check_grads_resampling(make) <= 1e-4
