"""Centralized configuration management using Pydantic Settings.

Every module reads its knobs from one section of :class:`RunConfig`. Sections
are ``BaseSettings`` so each can also be steered from the environment
(``SCRL_TRAIN_EPOCHS=20``), and the whole tree can be loaded from a TOML file
or from the resolved-config JSON that every command writes next to its
outputs.
"""

import contextlib
import json
import logging
import sys
import tomllib
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

import structlog
from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .helpers import atomic_write_json, canonical_hash

DEFAULT_SEED = 42

# Reward weight presets: the full composite reward and its two ablations.
REWARD_PRESETS: dict[str, tuple[float, float, float]] = {
    "full": (20.0, 5.0, 0.05),
    "biological": (20.0, 5.0, 0.0),
    "spatial": (0.0, 0.0, 0.05),
}

STRATEGIES = ("scrl", "random", "uncertainty", "diversity")


def _settings(prefix: str) -> SettingsConfigDict:
    return SettingsConfigDict(
        env_prefix=prefix,
        case_sensitive=False,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


class SynthConfig(BaseSettings):
    """Configuration for the synthetic dataset generator."""

    n_spots: int = Field(default=2000, ge=1, description="Number of spots N")
    n_slides: int = Field(default=8, ge=1, description="Number of slides S")
    n_genes: int = Field(default=300, ge=2, description="Gene count G")
    feature_dim: int = Field(default=64, ge=1, description="Image feature width d")
    embedding_dim: int = Field(
        default=32, ge=1, description="Expression embedding width d_z"
    )
    n_types: int = Field(default=8, ge=1, description="Planted cell types")
    n_reference_cells: int = Field(
        default=5000, ge=1, description="Single-cell reference size M"
    )
    noise: float = Field(default=0.3, ge=0.0, description="Noise standard deviation")
    min_patches: int = Field(default=1, ge=1, description="Min patches per type")
    max_patches: int = Field(default=3, ge=1, description="Max patches per type")
    include_expr_embeddings: bool = Field(
        default=True,
        description="Write expr_embeddings.scrm (off exercises the reward fallback)",
    )
    seed: int = Field(default=DEFAULT_SEED, description="Generator seed")

    model_config = _settings("SCRL_SYNTH_")

    @model_validator(mode="after")
    def check_sizes(self) -> "SynthConfig":
        """Cross-field size rules."""
        if self.n_types > self.n_reference_cells:
            raise ConfigError("n_types must not exceed n_reference_cells")
        if self.n_spots < self.n_types:
            raise ConfigError("n_spots must be at least n_types")
        if self.n_spots < self.n_slides:
            raise ConfigError("n_spots must be at least n_slides")
        if self.min_patches > self.max_patches:
            raise ConfigError("min_patches must not exceed max_patches")
        return self


class DatasetConfig(BaseSettings):
    """Configuration for dataset ingestion."""

    normalize_coordinates: bool = Field(
        default=False,
        description="Min-max normalize coordinates per slide at load time "
        "(for raw pixel coordinates); off means coordinates must already lie "
        "in [0, 1]",
    )

    model_config = _settings("SCRL_DATA_")


class RewardConfig(BaseSettings):
    """Configuration for the single-cell guided reward."""

    preset: Literal["full", "biological", "spatial"] = Field(
        default="full",
        description="Weight preset used for any weight left unset",
    )
    w_sc: float | None = Field(default=None, ge=0.0, description="Coverage weight")
    w_type: float | None = Field(default=None, ge=0.0, description="Diversity weight")
    w_spa: float | None = Field(default=None, ge=0.0, description="Spatial weight")
    spatial_mode: Literal["verbatim", "corrected"] = Field(
        default="verbatim",
        description="verbatim adds D_cover; corrected rewards small D_cover",
    )
    reward_scope: Literal["pool", "batch"] = Field(
        default="pool", description="Score the cumulative pool or the new batch"
    )
    disp_exclude_self: bool = Field(
        default=False, description="Drop self-pairs from the dispersion mean"
    )
    pca_dim: int = Field(default=50, ge=1, description="Reference PCA width")
    n_clusters: int = Field(default=50, ge=1, description="Reference cluster count C")
    kmeans_batch: int = Field(default=1024, ge=1, description="Mini-batch size")
    kmeans_iters: int = Field(default=100, ge=1, description="Mini-batch iterations")
    eps: float = Field(default=1e-8, gt=0.0, description="Entropy epsilon")
    seed: int = Field(default=DEFAULT_SEED, description="PCA/k-means seed")

    model_config = _settings("SCRL_REWARD_")

    def weights(self) -> tuple[float, float, float]:
        """Resolve (w_sc, w_type, w_spa), falling back to the preset."""
        base = REWARD_PRESETS[self.preset]
        return (
            base[0] if self.w_sc is None else self.w_sc,
            base[1] if self.w_type is None else self.w_type,
            base[2] if self.w_spa is None else self.w_spa,
        )


class SamplerConfig(BaseSettings):
    """Configuration for the reinforcement-learning sampler."""

    budget: int | float = Field(
        default=0.1,
        description="Budget B: an int is a spot count, a float a ratio of N",
    )
    rounds: int = Field(default=20, ge=1, description="Sampling rounds")
    warmup_random: bool = Field(default=True, description="Random first round")
    lr: float = Field(default=0.05, ge=0.0, description="Policy learning rate")
    momentum: float = Field(
        default=0.0, ge=0.0, lt=1.0, description="Policy momentum (0 = plain ascent)"
    )
    baseline: Literal["none", "running_mean"] = Field(
        default="running_mean", description="Reward baseline"
    )
    baseline_decay: float = Field(default=0.9, ge=0.0, lt=1.0)
    hidden: int = Field(default=128, ge=1, description="Policy hidden width")
    interleave_epochs: int = Field(
        default=0,
        ge=0,
        description="Predictor epochs between sampling rounds (0 = two-stage)",
    )
    seed: int = Field(default=DEFAULT_SEED, description="Sampler seed")

    model_config = _settings("SCRL_SAMPLER_")

    @field_validator("budget")
    @classmethod
    def validate_budget(cls, v: int | float) -> int | float:
        """Counts must be positive; ratios must lie in (0, 1]."""
        if isinstance(v, bool):
            raise ConfigError("budget must be a count or a ratio, not a flag")
        if isinstance(v, int):
            if v < 1:
                raise ConfigError(f"budget count must be >= 1, got {v}")
        elif not 0.0 < v <= 1.0:
            raise ConfigError(f"budget ratio must lie in (0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def check_rounds(self) -> "SamplerConfig":
        """A count budget must cover at least one spot per round."""
        if isinstance(self.budget, int) and self.budget < self.rounds:
            raise ConfigError(
                f"budget count {self.budget} is smaller than rounds {self.rounds}"
            )
        return self


class BaselineConfig(BaseSettings):
    """Configuration for the comparison samplers."""

    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    passes: int = Field(default=20, ge=1, description="MC-dropout passes T")
    warm_start_ratio: float = Field(
        default=0.05,
        gt=0.0,
        le=1.0,
        description="Random warm start used to train the queried predictor",
    )
    pca_dim: int = Field(default=128, ge=1, description="Diversity PCA width")
    min_points: int = Field(default=5, ge=1, description="DBSCAN min-points")
    neighbors: int = Field(
        default=5, ge=1, description="k of the k-NN distance setting DBSCAN's radius"
    )
    seed: int = Field(default=DEFAULT_SEED, description="Baseline seed")

    model_config = _settings("SCRL_BASELINE_")


class TrainConfig(BaseSettings):
    """Configuration for the regression-retrieval predictor."""

    lr0: float = Field(default=1e-2, ge=0.0, description="Initial learning rate")
    lr_min: float = Field(default=1e-6, ge=0.0, description="Final learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=256, ge=1)
    epochs: int = Field(default=100, ge=1)
    hidden: int = Field(default=512, ge=1, description="Regression hidden width H")
    proj_dim: int = Field(default=256, ge=1, description="Projection head width")
    lambda_r: float = Field(default=1.0, ge=0.0)
    lambda_p: float = Field(default=0.25, ge=0.0)
    lambda_kd: float = Field(default=0.25, ge=0.0)
    top_k: int = Field(default=50, ge=1, description="Retrieved neighbours K")
    top_t: int = Field(default=10, ge=1, description="Kept cell types T")
    m_threshold: float = Field(default=0.15, ge=0.0, le=1.0)
    temperature: float = Field(default=0.07, gt=0.0, description="InfoNCE tau")
    use_retrieval: bool = Field(default=True, description="Retrieval branch on/off")
    cell_type_filter: bool = Field(
        default=True, description="Majority cell-type filtering on/off"
    )
    seed: int = Field(default=DEFAULT_SEED, description="Training seed")

    model_config = _settings("SCRL_TRAIN_")

    @model_validator(mode="after")
    def check_ranges(self) -> "TrainConfig":
        """Cross-field rules."""
        if self.top_t > self.top_k:
            raise ConfigError("top_t must not exceed top_k")
        if self.lr_min > self.lr0:
            raise ConfigError("lr_min must not exceed lr0")
        return self


class SampleConfig(BaseSettings):
    """What the ``sample`` command selects: strategy and optional training fold."""

    strategy: Literal["scrl", "random", "uncertainty", "diversity"] = Field(
        default="scrl", description="Sampling strategy"
    )
    fold: int | None = Field(
        default=None, ge=0, description="Sample only from this fold's training slides"
    )

    model_config = _settings("SCRL_SAMPLE_")


class SweepConfig(BaseSettings):
    """Configuration for the budget-sweep harness."""

    strategies: list[Literal["scrl", "random", "uncertainty", "diversity"]] = Field(
        default_factory=lambda: list(STRATEGIES)
    )
    ratios: list[float] = Field(default_factory=lambda: [0.10, 0.25, 0.50, 0.75])
    seeds: list[int] = Field(default_factory=lambda: [42, 43, 44])
    folds: int = Field(default=4, ge=2, description="Cross-validation folds")
    split_seed: int = Field(
        default=DEFAULT_SEED, description="Seed of the slide-level fold assignment"
    )
    workers: int = Field(default=1, ge=1, description="Parallel sweep cells")

    model_config = _settings("SCRL_SWEEP_")

    @field_validator("ratios")
    @classmethod
    def validate_ratios(cls, v: list[float]) -> list[float]:
        """Every ratio must lie in (0, 1]."""
        for ratio in v:
            if not 0.0 < ratio <= 1.0:
                raise ConfigError(f"sweep ratio must lie in (0, 1], got {ratio}")
        return v


class RuntimeConfig(BaseSettings):
    """Process-level limits that never change numeric output."""

    threads: int | None = Field(
        default=None, ge=1, description="Cap on worker parallelism (SCRL_THREADS)"
    )

    model_config = _settings("SCRL_")


class LoggingConfig(BaseSettings):
    """Configuration for log output."""

    log_level: str = Field(default="INFO", description="Log level")
    structured_logging: bool = Field(
        default=True, description="Render JSON lines instead of console text"
    )
    log_file_path: Path | None = Field(
        default=None, description="Mirror logs to this file as well as stderr"
    )

    model_config = _settings("SCRL_LOG_")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level is valid."""
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        v_upper = v.upper()
        if v_upper not in valid_levels:
            raise ValueError(f"Invalid log level: {v}. Must be one of {valid_levels}")
        return v_upper


class RunConfig(BaseSettings):
    """Main configuration combining all sections."""

    synth: SynthConfig = Field(default_factory=SynthConfig)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    # Namespaced so a bare SCRL_SYNTH/SCRL_TRAIN variable is never parsed as a
    # whole sub-config object; sections read their own prefixes.
    model_config = _settings("SCRL_RUN_")

    def worker_count(self) -> int:
        """Sweep workers, capped by ``SCRL_THREADS`` when set."""
        cap = self.runtime.threads
        return self.sweep.workers if cap is None else min(self.sweep.workers, cap)


# Sections that do not influence numeric results stay out of the hash.
_UNHASHED_SECTIONS = {"runtime", "logging"}


def config_hash(cfg: RunConfig) -> str:
    """Content hash of the numeric configuration."""
    return canonical_hash(cfg.model_dump(mode="json", exclude=_UNHASHED_SECTIONS))


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _merge_override(data: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key must be section.key, got {dotted!r}")
    section, key = parts
    fields = RunConfig.model_fields
    if section not in fields:
        raise ConfigError(f"unknown config section {section!r}")
    section_cls = fields[section].annotation
    if key not in getattr(section_cls, "model_fields", {}):
        raise ConfigError(f"unknown config key {dotted!r}")
    data.setdefault(section, {})[key] = value


def load_run_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Load a RunConfig from TOML/JSON plus dotted overrides.

    A resolved-config file (``{"config": ..., "hash": ...}``) is accepted as
    input, so every run can be reproduced from the file it wrote.
    """
    data: dict[str, Any] = {}
    if path is not None:
        source = Path(path)
        try:
            if source.suffix == ".json":
                loaded = json.loads(source.read_text(encoding="utf-8"))
                data = loaded["config"] if "config" in loaded else loaded
            else:
                with source.open("rb") as handle:
                    data = tomllib.load(handle)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot read config file {source}: {e}") from e
    for dotted, value in (overrides or {}).items():
        _merge_override(data, dotted, value)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_resolved_config(cfg: RunConfig, path: str | Path) -> str:
    """Write the resolved config plus its hash; returns the hash."""
    digest = config_hash(cfg)
    atomic_write_json(path, {"config": cfg.model_dump(mode="json"), "hash": digest})
    return digest


# Global configuration instance
_config: RunConfig | None = None


def get_config() -> RunConfig:
    """Get or create the global configuration instance."""
    global _config
    if _config is None:
        _config = RunConfig()
    return _config


def reset_config() -> None:
    """Reset the global configuration instance (useful for testing)."""
    global _config
    _config = None


class _TeeStream:
    """Write-only text stream that fans each write out to several streams.

    structlog's PrintLogger writes every rendered line to a single file
    object; teeing stderr and a log file lets the configured file receive the
    same records without a second open handle or a stdlib logging bridge.
    """

    def __init__(self, *streams: Any) -> None:
        self._streams = streams

    def write(self, data: str) -> int:
        for stream in self._streams:
            stream.write(data)
        return len(data)

    def flush(self) -> None:
        for stream in self._streams:
            stream.flush()


_log_file_handle: Any = None


def configure_logging(config: LoggingConfig | None = None) -> None:
    """Configure structlog/stdlib logging from the logging configuration.

    Logs go to STDERR: stdout carries command results (``eval`` prints its
    metrics there), so logging on it would corrupt piped output. When
    ``log_file_path`` is set, the same records are mirrored to that file.
    """
    global _log_file_handle

    config = config or LoggingConfig()
    level = getattr(logging, config.log_level.upper(), logging.INFO)

    if _log_file_handle is not None:
        with contextlib.suppress(Exception):
            _log_file_handle.close()
        _log_file_handle = None

    log_stream: Any = sys.stderr
    if config.log_file_path:
        # Long-lived handle closed on the next reconfigure.
        log_file = Path(config.log_file_path).open("a", encoding="utf-8")  # noqa: SIM115
        _log_file_handle = log_file
        log_stream = _TeeStream(sys.stderr, log_file)

    logging.basicConfig(
        level=level,
        handlers=[logging.StreamHandler(log_stream)],
        format="%(message)s",
        force=True,
    )

    processors: list[Any] = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
    ]
    if config.structured_logging:
        processors.append(structlog.processors.JSONRenderer())
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=False))

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=log_stream),
        # Loggers resolve the stream on every call so a reconfigure takes
        # effect for module-level loggers too.
        cache_logger_on_first_use=False,
    )
