import json
import os

import pytest

from src.config.config_manager import config_hash, config_manager, deep_merge, get_path, load_run_config
from src.utils import logger as logger_mod
from src.utils.errors import ValidationError


def test_deep_merge_is_recursive_and_pure():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 3}
    merged = deep_merge(base, {"a": {"b": 5}, "e": {"f": 1}})
    assert merged == {"a": {"b": 5, "c": [1, 2]}, "d": 3, "e": {"f": 1}}
    assert base["a"]["b"] == 1
    assert deep_merge(base, None) == base


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": {"c": 2, "d": 3}}) == config_hash({"b": {"d": 3, "c": 2}, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


def test_settings_defaults_are_loaded():
    assert config_manager.get("support.density") == 0.5
    assert config_manager.get("train.penalty.kind") == "MCP"
    assert config_manager.get("missing.key", "fallback") == "fallback"


def test_load_run_config_layers(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 5}, "gen": {"n": 2}}), encoding="utf-8")
    cfg = load_run_config(str(path), overrides={"gen": {"n": 3}})
    assert cfg["train"]["epochs"] == 5
    assert cfg["gen"]["n"] == 3
    assert cfg["gen"]["m"] == 8

    fast = load_run_config(str(path), fast=True)
    assert fast["train"]["epochs"] == 8
    assert fast["support"]["trials"] == 2000
    assert fast["gen"]["sample_count"] == 600


def test_load_run_config_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_run_config(str(bad))
    listed = tmp_path / "list.yaml"
    listed.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_run_config(str(listed))
    with pytest.raises(OSError):
        load_run_config(str(tmp_path / "missing.yaml"))


def test_get_path():
    cfg = {"a": {"b": {"c": 1}}}
    assert get_path(cfg, "a.b.c") == 1
    assert get_path(cfg, "a.x", 7) == 7
    assert get_path(cfg, "a.b.c.d", None) is None


def test_run_logger_writes_under_log_dir():
    log = logger_mod.get_run_logger("unit_test", "check")
    log.info("[Test] hello")
    path = os.path.join(logger_mod.get_log_dir(), "unit_test")
    assert os.path.isdir(path)
    assert any(name.startswith("ica_lab_") for name in os.listdir(path))


def test_run_events_are_opt_in():
    events = os.path.join(logger_mod.get_log_dir(), "events")
    logger_mod.set_run_event_logging("sample_events", False)
    logger_mod.log_run_event("sample_events", {"x": 1})
    before = [f for f in os.listdir(events) if f.startswith("sample_events")] if os.path.isdir(events) else []
    assert before == []

    logger_mod.set_run_event_logging("sample_events", True)
    logger_mod.log_run_event("sample_events", {"x": 1})
    files = [f for f in os.listdir(events) if f.startswith("sample_events")]
    assert len(files) == 1
    with open(os.path.join(events, files[0]), encoding="utf-8") as f:
        assert json.loads(f.readline()) == {"x": 1}
    logger_mod.set_run_event_logging("sample_events", False)


def test_missing_settings_file_is_created_with_defaults(tmp_path, monkeypatch):
    target = tmp_path / "config" / "settings.yaml"
    with monkeypatch.context() as mp:
        mp.setattr(config_manager, "CONFIG_FILE", str(target))
        config_manager._initialize()
        assert target.exists()
        assert not target.with_suffix(".yaml.tmp").exists()
        assert config_manager.get("train.penalty.kind") == "MCP"
        assert config_manager.get("reproduce.reg_kinds") == ["L1", "SCAD", "MCP"]

        config_manager.save_config({"support": {"density": 0.25}})
        config_manager.load_config()
        assert config_manager.get("support.density") == 0.25
        assert config_manager.get("support.trials") == 10000
    config_manager.load_config()
    assert config_manager.get("support.density") == 0.5
