import pytest

from refkv import config
from refkv.config import DEFAULTS, ConfigError


def test_defaults_build_every_component():
    cfg = config.load()
    assert config.unet_config(cfg).mechanism == "cachekv"
    assert config.codec_config(cfg).latent_size == 8
    assert config.schedule(cfg).T == 1000
    assert config.guidance(cfg).scale == 1.5
    assert config.loss_config(cfg).lambda_time_id == 0.1
    assert config.ratios(cfg) == (0.9, 0.05, 0.05)
    assert cfg["n_refs"] == 5 and cfg["steps"] == 100


def test_file_sections_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 7\n# comment\n[model]\nmechanism = spatial-concat\n[train]\ndrop_lq = yes\nlr = 5e-4\n",
                 encoding="utf-8")
    cfg = config.load(p, {"seed": "9", "steps": None})
    assert cfg["seed"] == 9 and cfg["steps"] == 100
    assert cfg["model.mechanism"] == "spatial-concat"
    assert cfg["train.drop_lq"] is True and cfg["train.lr"] == 5e-4


def test_text_round_trip():
    cfg = dict(DEFAULTS, **{"train.lr": 3e-4, "train.augment": False, "model.mechanism": "cross-attention"})
    assert config.parse_text(config.to_text(cfg)) == cfg


@pytest.mark.parametrize("text, match", [
    ("bogus = 1\n", "unknown config key"),
    ("[model]\nwidth = 3\n", "model.width"),
    ("seed = many\n", "bad value for seed"),
    ("[train]\naugment = maybe\n", "train.augment"),
    ("[model\n", "config"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        config.parse_text(text)


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.cfg"):
        config.load(tmp_path / "nowhere.cfg")
    with pytest.raises(ConfigError):
        config.load(None, {"nope": 1})
