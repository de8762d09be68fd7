import pytest

from deepminer.config import dump_config, load_config, parse_config
from deepminer.errors import ConfigInvalid
from deepminer.training import TrainConfig

TEXT = """
# toy run
epochs = 3        # short
P = 4
K = 4
decay_epochs = 40, 70
checkpoint = out.ckpt
ie_positions = 2
local_branch = false
attention_sites = g:2, g:3, e_1:3
"""


def test_parse_values():
    cfg = parse_config(TEXT)
    assert cfg.epochs == 3 and cfg.P == 4 and cfg.decay_epochs == (40, 70)
    assert cfg.checkpoint == "out.ckpt"
    assert cfg.model.ie_positions == (2,) and cfg.model.local_branch is False
    assert ("e_1", 3) in cfg.model.attention_sites
    assert cfg.base_lr == 3.5e-4


def test_round_trip():
    cfg = parse_config(TEXT)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(TrainConfig())) == TrainConfig()


@pytest.mark.parametrize("text,match", [
    ("colour = red", "unknown key"),
    ("epochs", "key = value"),
    ("epochs = many", "epochs"),
    ("tau = 2", "tau"),
    ("block_widths = 16,x", "block_widths"),
    ("local_branch = maybe", "local_branch"),
    ("decay_epochs = 70, 40", "decay_epochs"),
])
def test_errors(text, match):
    with pytest.raises(ConfigInvalid, match=match):
        parse_config(text)


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TEXT, encoding="utf-8")
    assert load_config(path).epochs == 3
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.cfg")
