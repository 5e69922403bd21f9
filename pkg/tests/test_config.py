"""Tests for configuration loading and logging setup."""

import json
from pathlib import Path

import pytest
import structlog
from pydantic import ValidationError

from scrl_st.config import (
    LoggingConfig,
    RunConfig,
    SamplerConfig,
    SweepConfig,
    TrainConfig,
    config_hash,
    configure_logging,
    get_config,
    load_run_config,
    parse_override,
    reset_config,
    write_resolved_config,
)
from scrl_st.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_stray_unprefixed_env_var_does_not_crash_startup(monkeypatch):
    """A bare SCRL_TRAIN/SCRL_SWEEP variable set by unrelated tooling must not
    be misread as a nested config object."""
    monkeypatch.setenv("SCRL_TRAIN", "some-unrelated-value")
    monkeypatch.setenv("SCRL_SWEEP", "another-value")
    cfg = RunConfig()
    assert cfg.train.top_k == 50
    assert cfg.sweep.folds == 4


def test_section_reads_its_own_prefix(monkeypatch):
    monkeypatch.setenv("SCRL_TRAIN_EPOCHS", "7")
    monkeypatch.setenv("SCRL_REWARD_PRESET", "spatial")
    monkeypatch.setenv("SCRL_SAMPLE_STRATEGY", "random")
    cfg = RunConfig()
    assert cfg.train.epochs == 7
    assert cfg.reward.weights() == (0.0, 0.0, 0.05)
    assert cfg.sample.strategy == "random"
    assert cfg.sampler.budget == 0.1


def test_defaults():
    cfg = RunConfig()
    assert cfg.reward.weights() == (20.0, 5.0, 0.05)
    assert (cfg.train.lambda_r, cfg.train.lambda_p, cfg.train.lambda_kd) == (1.0, 0.25, 0.25)
    assert (cfg.train.top_k, cfg.train.top_t, cfg.train.m_threshold) == (50, 10, 0.15)
    assert cfg.baseline.passes == 20
    assert cfg.sweep.ratios == [0.10, 0.25, 0.50, 0.75]
    assert (cfg.sample.strategy, cfg.sample.fold) == ("scrl", None)


class TestValidation:
    @pytest.mark.parametrize("budget", [0, -3, 0.0, 1.5])
    def test_bad_budget(self, budget):
        with pytest.raises(ValidationError):
            SamplerConfig(budget=budget, rounds=1)

    def test_count_budget_must_cover_rounds(self):
        with pytest.raises(ValidationError, match="smaller than rounds"):
            SamplerConfig(budget=5, rounds=10)

    def test_ratio_and_count_budgets(self):
        assert SamplerConfig(budget=0.3).budget == 0.3
        assert SamplerConfig(budget=40).budget == 40

    def test_top_t_above_top_k(self):
        with pytest.raises(ValidationError):
            TrainConfig(top_k=5, top_t=6)

    def test_sweep_ratio_range(self):
        with pytest.raises(ValidationError):
            SweepConfig(ratios=[0.5, 1.2])

    def test_unknown_log_level(self):
        with pytest.raises(ValidationError):
            LoggingConfig(log_level="LOUD")


class TestOverrides:
    def test_parse_json_values(self):
        assert parse_override("train.epochs=5") == ("train.epochs", 5)
        assert parse_override("sweep.ratios=[0.1, 0.5]") == ("sweep.ratios", [0.1, 0.5])
        assert parse_override("reward.preset=spatial") == ("reward.preset", "spatial")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_override("train.epochs")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="section"):
            load_run_config(overrides={"nope.epochs": 5})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.epoch"):
            load_run_config(overrides={"train.epoch": 5})

    def test_invalid_value_becomes_config_error(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"train.top_t": 99})


def test_toml_file_with_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[train]\nepochs = 3\nhidden = 16\n\n[sweep]\nseeds = [1, 2]\n')
    cfg = load_run_config(path, {"train.epochs": 4})
    assert cfg.train.epochs == 4
    assert cfg.train.hidden == 16
    assert cfg.sweep.seeds == [1, 2]


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_load(name):
    load_run_config(CONFIGS / name)


def test_reward_ablation_arms():
    path = CONFIGS / "reward_ablation.toml"
    biological = load_run_config(path)
    assert biological.reward.weights() == (20.0, 5.0, 0.0)
    assert biological.sweep.strategies == ["scrl", "random"]
    assert load_run_config(path, {"reward.preset": "spatial"}).reward.weights() == (0.0, 0.0, 0.05)
    assert load_run_config(path, {"reward.preset": "full"}).reward.weights() == (20.0, 5.0, 0.05)


def test_unreadable_config_file(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_resolved_config_round_trip(tmp_path):
    cfg = load_run_config(overrides={"train.epochs": 9, "reward.preset": "biological"})
    path = tmp_path / "resolved.json"
    digest = write_resolved_config(cfg, path)

    assert json.loads(path.read_text())["hash"] == digest
    again = load_run_config(path)
    assert again == cfg
    assert config_hash(again) == digest


def test_hash_ignores_runtime_and_logging():
    base = RunConfig()
    other = load_run_config(overrides={"runtime.threads": 2, "logging.log_level": "DEBUG"})
    assert config_hash(base) == config_hash(other)
    assert config_hash(base) != config_hash(load_run_config(overrides={"train.seed": 1}))


def test_worker_count_is_capped_by_threads(monkeypatch):
    monkeypatch.setenv("SCRL_THREADS", "2")
    cfg = load_run_config(overrides={"sweep.workers": 8})
    assert cfg.worker_count() == 2
    assert RunConfig().worker_count() == 1


def test_global_config_singleton():
    first = get_config()
    assert get_config() is first
    reset_config()
    assert get_config() is not first


def test_configure_logging_writes_application_logs_to_file(tmp_path):
    """Setting log_file_path must route structlog records to the file too."""
    log_file = tmp_path / "run.log"
    try:
        configure_logging(LoggingConfig(log_file_path=log_file))
        structlog.get_logger("test.config.logfile").info("sweep_cell_event", fold=1)
    finally:
        configure_logging(LoggingConfig(log_file_path=None))

    record = json.loads(log_file.read_text(encoding="utf-8").strip().splitlines()[-1])
    assert record["event"] == "sweep_cell_event"
    assert record["fold"] == 1
