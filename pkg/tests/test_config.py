import json

import pytest

from stroke_eit.config import DEFAULT_CONFIG, OUTPUT_ENV_VAR, ConfigError, config_hash, load_config


def write(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_defaults_are_valid_and_explicit(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
    cfg = load_config()
    assert cfg == DEFAULT_CONFIG
    assert isinstance(cfg["seed"], int)


def test_file_overrides_nested_keys(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
    cfg = load_config(write(tmp_path, {"mo": {"alphaDelta": 5.0}, "seed": 3}))
    assert cfg["mo"]["alphaDelta"] == 5.0
    assert cfg["mo"]["gamma"] == DEFAULT_CONFIG["mo"]["gamma"]
    assert cfg["seed"] == 3


def test_flags_beat_file_and_environment(tmp_path, monkeypatch):
    path = write(tmp_path, {"seed": 3, "outputDir": "from_file"})
    monkeypatch.setenv(OUTPUT_ENV_VAR, "from_env")
    assert load_config(path)["outputDir"] == "from_env"
    cfg = load_config(path, seed=9, out="from_flag")
    assert cfg["outputDir"] == "from_flag" and cfg["seed"] == 9
    monkeypatch.delenv(OUTPUT_ENV_VAR)
    assert load_config(path)["outputDir"] == "from_file"


@pytest.mark.parametrize("bad", [
    {"nosuchkey": 1},
    {"mo": {"nosuchkey": 1}},
    {"seed": -1},
    {"seed": 1.5},
    {"dataset": {"count": 10}},
    {"contactImpedance": 0.0},
    {"mo": {"cases": 99}},
])
def test_bad_configs_are_rejected(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, bad))


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_hash_ignores_location_only():
    a = dict(DEFAULT_CONFIG)
    b = dict(DEFAULT_CONFIG, outputDir="elsewhere")
    c = dict(DEFAULT_CONFIG, seed=1)
    assert config_hash(a) == config_hash(b) != config_hash(c)
    assert len(config_hash(a)) == 16
