import pytest

from src.configuration import (
    coerce_value, default_config, flatten, load_config, parse_overrides, read_key_values, write_key_values,
)
from src.errors import ConfigError, DataIOError


def test_defaults():
    config = load_config()
    assert config["radar"]["samples_per_chirp"] == 256
    assert config["audio"]["window"] == 16000
    assert config["train"]["modalities"] == "acoustic,radar"


def test_desk_preset_merges_over_defaults():
    config = load_config(preset="desk")
    assert config["radar"]["samples_per_chirp"] == 64
    assert config["radar"]["chirp_slope"] == 29.98e12
    assert config["model"]["embed_dim"] == 32
    assert config["train"]["learning_rate"] == 2e-3
    assert config["train"]["epochs"] == 60


def test_defaults_are_copies():
    default_config()["radar"]["samples_per_chirp"] = 1
    assert default_config()["radar"]["samples_per_chirp"] == 256


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_config(preset="laptop")


def test_precedence(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# experiment\ntrain.epochs=12\ntrain.seed=4\n")
    config = load_config(path, overrides=["train.seed=9"])
    assert config["train"]["epochs"] == 12
    assert config["train"]["seed"] == 9
    assert config["train"]["batch_size"] == 64


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides=["train.epoch=3"])
    path = tmp_path / "run.env"
    path.write_text("sonar.gain=2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(DataIOError):
        load_config(tmp_path / "absent.env")


@pytest.mark.parametrize("raw,default,expected", [
    ("yes", False, True),
    ("OFF", True, False),
    ("17", 3, 17),
    ("2.5e6", 10e6, 2.5e6),
    ("[3, 12]", [6, 12], [3, 12]),
    ("radar", "acoustic,radar", "radar"),
])
def test_coercion(raw, default, expected):
    value = coerce_value(raw, default, "section.key")
    assert value == expected
    assert type(value) is type(expected)


def test_coercion_failure():
    with pytest.raises(ConfigError):
        coerce_value("many", 3, "train.epochs")
    with pytest.raises(ConfigError):
        coerce_value("maybe", True, "radar.window")


def test_override_syntax():
    assert parse_overrides(["train.seed = 3"]) == {"train.seed": " 3"}
    with pytest.raises(ConfigError):
        parse_overrides(["train.seed"])


def test_key_value_file_round_trip(tmp_path):
    config = load_config(preset="desk")
    path = tmp_path / "config.env"
    write_key_values(path, flatten(config, ["radar", "noise"]), header="resolved")
    assert load_config(path) == load_config(overrides=[
        f"{key}={value}" for key, value in read_key_values(path).items()
    ])
    reloaded = load_config(path)
    assert reloaded["radar"] == config["radar"]
    assert reloaded["noise"]["snr_levels"] == [6, 12, 18, 24]


def test_fractional_snr_levels():
    config = load_config(overrides=["noise.snr_levels=6.5,12"])
    assert config["noise"]["snr_levels"] == [6.5, 12.0]
    assert all(isinstance(level, float) for level in config["noise"]["snr_levels"])
