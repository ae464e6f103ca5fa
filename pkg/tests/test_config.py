import pytest

from sparsevox.config import (RunConfig, ablation_config, config_hash,
                              desk_config, full_config, parse_config,
                              serialize_config)
from sparsevox.exceptions import ConfigError


def test_round_trip_default():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_round_trip_modified():
    cfg = ablation_config(seed=13, fusion=False, stages=((2, 2, 2), (2, 2, 1)),
                          stage_widths=(16, 24), lr=5e-4)
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    assert config_hash(parse_config(text)) == config_hash(cfg)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'banana'"):
        parse_config("banana = 3\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("steps 100\n")


def test_comments_and_blanks_allowed():
    cfg = parse_config("# comment\n\nsteps = 7  # trailing\n")
    assert cfg.steps == 7


def test_presets_validate():
    assert desk_config().d_model == 96
    assert desk_config().decoder_layers == 3
    assert desk_config().num_queries == 60
    assert ablation_config().d_model % 6 == 0
    full = full_config()
    assert full.num_queries == 900
    assert full.dfm_window == (24, 24, 11)
    assert full.dfm_set_size == 72
    assert full.dfm_shift == (12, 12, 0)
    assert full.dfm_blocks == 4
    assert full.grid().resolution == (1440, 1440, 40)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        RunConfig(d_model=100)  # not divisible by 6
    with pytest.raises(ConfigError):
        RunConfig(stages=((2, 2, 2),), stage_widths=(8, 8))
    with pytest.raises(ConfigError):
        RunConfig(optimizer="lion")


def test_hash_changes_with_content():
    assert config_hash(RunConfig()) != config_hash(RunConfig(seed=1))
