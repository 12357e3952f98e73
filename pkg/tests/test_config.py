"""Config grammar: round trips, validation, diagnostics."""

import pytest

from taskmesh.config import ConfigError, ExperimentConfig, parse, serialize


def test_defaults_are_valid():
    ExperimentConfig().validate()


def test_parse_roundtrip_identity():
    text = """
# comment
transport = sim
nodes = 4
pattern = stencil1d
ccr = 0.5
plot = false
seed = 42   # trailing comment
"""
    config = parse(text)
    assert config.nodes == 4
    assert config.pattern == "stencil1d"
    assert config.ccr == 0.5
    assert config.plot is False
    assert config.seed == 42
    again = parse(serialize(config))
    assert again == config
    assert serialize(again) == serialize(config)


def test_unknown_key_reports_line_number():
    with pytest.raises(ConfigError, match="line 3"):
        parse("transport = sim\nnodes = 2\nbogus = 1\n")


def test_bad_value_reports_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse("transport = sim\nnodes = many\n")


def test_missing_equals_reports_line_number():
    with pytest.raises(ConfigError, match="line 1"):
        parse("transport sim\n")


def test_invalid_pattern_rejected():
    with pytest.raises(ConfigError, match="pattern"):
        parse("pattern = spiral\n")


def test_invalid_ranges_rejected():
    for text in ("repeats = 0\n", "nodes = 0\n", "ccr = -1\n", "latency_us = 0\n"):
        with pytest.raises(ConfigError):
            parse(text)
