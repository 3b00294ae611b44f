import pytest

from bita.config import load_config, parse_config
from bita.spectral import MixerKind

TEXT = """
# toy run
hidden_dim = 32
num_layers = 2
mixer = self-attn
seed = 5
stage1.lr_peak = 2e-3   # trailing comment
stage2.epochs = 7
finetune.augment = full
"""


def test_parse_values_and_defaults():
    cfg = parse_config(TEXT, env={})
    assert cfg.model.hidden_dim == 32 and cfg.model.num_layers == 2
    assert cfg.model.mixer is MixerKind.SELF_ATTENTION
    assert cfg.seed == 5
    assert cfg.stages["stage1"].lr_peak == 2e-3
    assert cfg.stages["stage2"].epochs == 7
    assert cfg.stages["finetune"].augment == "full"
    assert cfg.stages["stage2"].batch_size == 16


def test_env_seed_override():
    assert parse_config(TEXT, env={"BITA_SEED": "11"}).seed == 11
    assert parse_config("", env={"BITA_SEED": "3"}).seed == 3


def test_digest_tracks_content():
    a = parse_config(TEXT, env={})
    assert a.digest() == parse_config(TEXT, env={}).digest()
    assert a.digest() != parse_config(TEXT + "stage1.epochs = 2\n", env={}).digest()


@pytest.mark.parametrize("line", ["bogus = 1", "stage3.epochs = 2", "stage1.bogus = 1",
                                  "hidden_dim = wide", "no equals sign"])
def test_bad_lines_rejected_with_line_number(line):
    with pytest.raises(ValueError, match="line 2"):
        parse_config("seed = 1\n" + line, env={})


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("toy.cfg", "paper.cfg"):
        load_config(root / name, env={})
