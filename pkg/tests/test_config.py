import json

import pytest

from pwsynth.config import load_config, schema
from pwsynth.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.generator_config().modulation_mode == "spatial"
    assert cfg.train_config().lr_base == 0.002
    assert cfg.coord_train_section().steps == 500
    assert cfg.coordnet_config((48, 36)).uv_resolution == (48, 36)


def test_variant_selected_by_two_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generator": {"modulation_mode": "nonspatial", "appearance_source": "incomplete_uv"}}))
    g = load_config(p).generator_config()
    assert (g.modulation_mode, g.appearance_source) == ("nonspatial", "incomplete_uv")


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"learning_rate": 1}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"optimizer": {}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{ not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config().set("generator.depth", 3)


def test_bad_values_rejected_at_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generator": {"output_resolution": 60}}))
    with pytest.raises(ConfigError):
        load_config(p)


def test_set_and_seed_propagation():
    cfg = load_config()
    cfg.set("seed", 9)
    assert cfg.train_config().seed == 9
    cfg.set("trainer.noise_mode", "zero")
    assert cfg.train_config().noise_mode == "zero"
    assert "trainer.lr_base" in schema() and "generator.modulation_mode" in schema()
