"""Pytest configuration and shared fixtures for scrl-st tests."""

import os
from collections.abc import Callable
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from scrl_st.config import (
    LoggingConfig,
    RunConfig,
    SamplerConfig,
    SweepConfig,
    SynthConfig,
    TrainConfig,
    configure_logging,
    reset_config,
)
from scrl_st.dataset import Dataset, load_dataset
from scrl_st.synthgen import generate

# Numeric property tests build arrays per example; wall-clock deadlines only
# add flakiness on slow CI machines.
settings.register_profile(
    "scrl",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("scrl")


def small_synth_config(**overrides: object) -> SynthConfig:
    """A desk-sized synthetic dataset that keeps every test fast."""
    values: dict[str, object] = {
        "n_spots": 160,
        "n_slides": 4,
        "n_genes": 12,
        "feature_dim": 8,
        "embedding_dim": 6,
        "n_types": 4,
        "n_reference_cells": 200,
        "noise": 0.3,
        "seed": 42,
    }
    values.update(overrides)
    return SynthConfig(**values)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> Path:
    """Strip SCRL_* variables and run each test from its own directory.

    Settings sections read the environment and a ``.env`` in the working
    directory, so a developer's shell must not leak into test configs.
    """
    for name in list(os.environ):
        if name.upper().startswith("SCRL_"):
            monkeypatch.delenv(name, raising=False)
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    reset_config()
    configure_logging(LoggingConfig(log_level="WARNING"))
    yield work
    reset_config()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Small synthetic dataset generated once per session (read-only)."""
    return generate(small_synth_config(), tmp_path_factory.mktemp("synth"))


@pytest.fixture
def synth_ds(synth_dir: Path) -> Dataset:
    """A freshly loaded dataset with an empty revealed set."""
    return load_dataset(synth_dir)


@pytest.fixture
def fast_train() -> TrainConfig:
    return TrainConfig(epochs=3, hidden=32, proj_dim=16, top_k=10, top_t=3, batch_size=64)


@pytest.fixture
def fast_run(fast_train: TrainConfig) -> RunConfig:
    """RunConfig sized for the synthetic fixture."""
    return RunConfig(
        synth=small_synth_config(),
        sampler=SamplerConfig(rounds=4, hidden=16),
        train=fast_train,
        sweep=SweepConfig(
            strategies=["random", "scrl"], ratios=[0.25], seeds=[42], folds=2
        ),
    )


@pytest.fixture
def make_synth(tmp_path: Path) -> Callable[..., Path]:
    """Generate a small dataset with config overrides into a fresh directory."""
    counter = iter(range(1_000))

    def _make(**overrides: object) -> Path:
        return generate(small_synth_config(**overrides), tmp_path / f"synth{next(counter)}")

    return _make


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Four planted types over 800 spots, for the slower end-to-end comparisons."""
    cfg = small_synth_config(
        n_spots=800,
        n_genes=40,
        feature_dim=16,
        embedding_dim=12,
        n_reference_cells=1000,
    )
    return generate(cfg, tmp_path_factory.mktemp("desk"))
