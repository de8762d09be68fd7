import dataclasses
import struct

import numpy as np
import pytest

from deepminer.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from deepminer.errors import FormatError
from deepminer.tensor import no_grad


def _forward(model, x):
    model.eval()
    with no_grad():
        out = model(x)
    return {n: (bf.f.data, bf.f_bn.data, bf.logits.data) for n, bf in out.features.items()}


@pytest.fixture
def trained_like(tiny_model):
    r = np.random.default_rng(0)
    for _, t in tiny_model.named_tensors():
        t.data = t.data + r.normal(scale=0.1, size=t.shape)
    return tiny_model


def test_round_trip_is_bit_exact(tmp_path, trained_like):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_like, path, {"note": "x y"})
    loaded = load_checkpoint(path)
    assert loaded.config == trained_like.config
    assert loaded.metadata == {"note": "x y"}
    for (na, ta), (nb, tb) in zip(trained_like.named_tensors(), loaded.named_tensors()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    x = np.random.default_rng(1).uniform(size=(3, 3, 16, 8))
    a, b = _forward(trained_like, x), _forward(loaded, x)
    for name in a:
        for u, v in zip(a[name], b[name]):
            assert np.array_equal(u, v)


def test_bad_magic(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = bytearray(path.read_bytes())
    raw[0:1] = b"X"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, len(MAGIC) + 2, 200, -1])
def test_truncation(tmp_path, tiny_model, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_shape_mismatch_names_tensor(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    tiny_model.config = dataclasses.replace(tiny_model.config, block_widths=(16, 16, 16, 32))
    save_checkpoint(tiny_model, path)
    with pytest.raises(FormatError, match=r"tensor 'branches\.g\.blocks\.3\.conv1\.weight' has shape"):
        load_checkpoint(path)


def test_missing_and_unexpected_tensors(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    tiny_model.config = dataclasses.replace(tiny_model.config, local_branch=False)
    save_checkpoint(tiny_model, path)
    with pytest.raises(FormatError, match="unexpected tensor"):
        load_checkpoint(path)
    tiny_model.config = dataclasses.replace(tiny_model.config, local_branch=True, ie_positions=(1, 2, 3))
    save_checkpoint(tiny_model, path)
    with pytest.raises(FormatError, match="lacks tensors"):
        load_checkpoint(path)


def test_invalid_header(tmp_path):
    path = tmp_path / "m.ckpt"
    line = b"tau=7"
    path.write_bytes(MAGIC + struct.pack("<I", 1) + struct.pack("<I", len(line)) + line)
    with pytest.raises(FormatError, match="invalid config"):
        load_checkpoint(path)
    line = b"novalue"
    path.write_bytes(MAGIC + struct.pack("<I", 1) + struct.pack("<I", len(line)) + line)
    with pytest.raises(FormatError, match="key=value"):
        load_checkpoint(path)
