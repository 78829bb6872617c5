"""Config file parsing and the run-level defaults."""

import pytest

from fedfuse.config import ConfigError, RunConfig, format_config, parse_config, parse_config_text
from fedfuse.fusion import FusionPolicy

FULL = """\
# three desk-scale clients
federation.rounds = 12
federation.local_epochs = 2
federation.clients = 5
federation.timeout_s = 30
optimizer.lr = 5e-4
optimizer.decay = 0.9
fusion.mode = probability_sum
dsp.sample_rate_hz = 8
forest.trees = 50
seed = 42
"""


def test_defaults():
    cfg = RunConfig()
    assert cfg.rounds == 20 and cfg.local_epochs == 4 and cfg.clients == 3
    assert cfg.timeout_s == 120.0 and cfg.lr == 1e-4 and cfg.decay == 0.96
    assert cfg.fusion_mode is FusionPolicy.CONFIDENCE_TIE_BREAK
    assert cfg.sample_rate_hz == 4.0 and cfg.trees == 200 and cfg.seed == 0


def test_empty_text_gives_defaults():
    assert parse_config_text("") == RunConfig()
    assert parse_config_text("\n# only comments\n\n") == RunConfig()


def test_all_ten_keys_parse():
    cfg = parse_config_text(FULL)
    assert cfg == RunConfig(
        rounds=12,
        local_epochs=2,
        clients=5,
        timeout_s=30.0,
        lr=5e-4,
        decay=0.9,
        fusion_mode=FusionPolicy.PROBABILITY_SUM,
        sample_rate_hz=8.0,
        trees=50,
        seed=42,
    )


def test_inline_comment_and_whitespace():
    cfg = parse_config_text("  forest.trees =  25   # small run\n")
    assert cfg.trees == 25


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"<config>:3: unknown key 'forest\.depth'"):
        parse_config_text("seed = 1\n\nforest.depth = 9\n")


def test_missing_equals_reports_line():
    with pytest.raises(ConfigError, match=r"myrun:2: expected key = value"):
        parse_config_text("seed = 1\nfederation.rounds 8\n", source="myrun")


def test_duplicate_key_reports_line():
    with pytest.raises(ConfigError, match=r":4: duplicate key 'seed'"):
        parse_config_text("seed = 1\n# comment\n\nseed = 2\n")


def test_bad_int_reports_line_and_key():
    with pytest.raises(ConfigError, match=r":1: bad value for forest\.trees"):
        parse_config_text("forest.trees = many\n")


def test_bad_fusion_mode_reports_line():
    with pytest.raises(ConfigError, match=r":1: bad value for fusion\.mode"):
        parse_config_text("fusion.mode = majority\n")


@pytest.mark.parametrize(
    "line",
    [
        "federation.rounds = 0",
        "federation.clients = 0",
        "federation.timeout_s = 0",
        "optimizer.lr = 0",
        "optimizer.decay = 0",
        "optimizer.decay = 1.5",
        "forest.trees = 0",
        "dsp.sample_rate_hz = -4",
    ],
)
def test_out_of_range_values_rejected(line):
    with pytest.raises(ConfigError):
        parse_config_text(line + "\n")


def test_parse_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(FULL)
    assert parse_config(path) == parse_config_text(FULL)


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        parse_config(tmp_path / "nope.cfg")


def test_error_names_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("bogus.key = 1\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:1"):
        parse_config(path)


def test_format_config_round_trips():
    cfg = parse_config_text(FULL)
    assert parse_config_text(format_config(cfg)) == cfg
    assert parse_config_text(format_config(RunConfig())) == RunConfig()


def test_format_config_is_plain_text():
    text = format_config(RunConfig())
    assert "fusion.mode = confidence_tie_break" in text
    assert "federation.timeout_s = 120.0" in text


def test_derived_configs():
    cfg = parse_config_text(FULL)
    fed = cfg.federation()
    assert fed.n_clients == 5 and fed.rounds == 12 and fed.local_epochs == 2
    assert fed.straggler_timeout == 30.0 and fed.seed == 42
    adam = cfg.adam()
    assert adam.lr == 5e-4 and adam.decay == 0.9
    assert cfg.forest().n_trees == 50
