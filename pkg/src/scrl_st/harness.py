"""Evaluation harness: metrics, slide-level cross-validation and the budget sweep.

A sweep cell is one (fold, strategy, ratio, seed) combination: sample a pool
from the training folds, train the predictor on it and score the held-out
fold. Cells are appended to ``cells.jsonl`` as they finish, so an
interrupted sweep resumes where it stopped.
"""

import io
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor, as_completed
from itertools import product
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .baselines import diversity_sampler, random_sampler, uncertainty_pool
from .config import RunConfig, config_hash
from .dataset import Dataset, load_dataset
from .errors import ConfigError, DimensionError
from .helpers import append_jsonl, atomic_write_bytes, atomic_write_json, canonical_hash, read_jsonl
from .losses import pearson_rows
from .policy import ActiveSampler, resolve_budget
from .predictor import PredictorModel, PredictorTrainer, predict, train
from .rewards import RewardModel

logger = structlog.get_logger(__name__)

CELLS_FILE = "cells.jsonl"
REPORT_FILE = "report.csv"
SUMMARY_FILE = "summary.json"
REPORT_COLUMNS = [
    "strategy",
    "ratio",
    "fold",
    "seed",
    "mse",
    "mae",
    "pcc",
    "final_reward",
    "status",
]
SUMMARY_METRICS = ("mse", "mae", "pcc", "final_reward", "planted_coverage")
PCC_AXIS_NOTE = (
    "pcc is computed per spot across genes and then averaged over spots, "
    "the same axis as the training correlation loss"
)


class MetricTriple(BaseModel):
    """Test-set error and correlation."""

    model_config = ConfigDict(frozen=True)

    mse: float = Field(..., ge=0.0)
    mae: float = Field(..., ge=0.0)
    pcc: float = Field(..., ge=-1.0, le=1.0)


def metrics(truth: npt.ArrayLike, predicted: npt.ArrayLike) -> MetricTriple:
    """MSE and MAE over all entries; PCC per spot across genes, then averaged."""
    y = np.asarray(truth, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 2:
        raise DimensionError(f"metric shapes differ: {y.shape} vs {yhat.shape}")
    if y.shape[0] == 0:
        raise DimensionError("metrics need at least one spot")
    diff = yhat - y
    return MetricTriple(
        mse=float((diff**2).mean()),
        mae=float(np.abs(diff).mean()),
        pcc=float(np.clip(pearson_rows(y, yhat).mean(), -1.0, 1.0)),
    )


def crossval_split(sample_ids: npt.ArrayLike, folds: int = 4, seed: int = 42) -> list[list[int]]:
    """Balanced partition of distinct sample ids into ``folds`` folds.

    Raises:
        ConfigError: fewer distinct samples than folds.
    """
    unique = np.unique(np.asarray(sample_ids, dtype=np.int64))
    if unique.size < folds:
        raise ConfigError(f"{unique.size} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(unique)
    return [sorted(int(i) for i in perm[f::folds]) for f in range(folds)]


def fold_spot_ids(ds: Dataset, split: list[list[int]], fold: int) -> tuple[list[int], list[int]]:
    """(training spot ids, held-out spot ids) for one fold of a slide split."""
    if not 0 <= fold < len(split):
        raise ConfigError(f"fold {fold} outside [0, {len(split)})")
    held_out = np.isin(ds.slide_ids, split[fold])
    return (
        [int(i) for i in ds.spot_ids[~held_out]],
        [int(i) for i in ds.spot_ids[held_out]],
    )


def planted_type_coverage(ds: Dataset, pool: list[int]) -> float | None:
    """Fraction of the planted types present in ``ds`` that the pool contains."""
    if ds.planted_types is None:
        return None
    present = np.unique(ds.planted_types).size
    return np.unique(ds.planted_types[ds.index_of(pool)]).size / present


def evaluate(model: PredictorModel, ds: Dataset, spot_ids: list[int]) -> MetricTriple:
    rows = ds.index_of(spot_ids)
    return metrics(ds.ground_truth(spot_ids), predict(model, ds.features[rows]))


class SweepCell(BaseModel):
    """Coordinates of one sweep cell."""

    model_config = ConfigDict(frozen=True)

    fold: int
    strategy: Literal["scrl", "random", "uncertainty", "diversity"]
    ratio: float
    seed: int

    def key(self, digest: str) -> str:
        return canonical_hash({"cell": self.model_dump(), "config": digest})


class SweepRow(BaseModel):
    """One finished (or failed) cell."""

    strategy: str
    ratio: float
    fold: int
    seed: int
    mse: float | None = None
    mae: float | None = None
    pcc: float | None = None
    final_reward: float | None = None
    status: Literal["ok", "failed"] = "ok"
    planted_coverage: float | None = None
    pool_size: int | None = None
    error: str | None = None


class SweepReport(BaseModel):
    rows: list[SweepRow] = Field(default_factory=list)


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return cfg.model_copy(
        update={
            "sampler": cfg.sampler.model_copy(update={"seed": seed}),
            "baseline": cfg.baseline.model_copy(update={"seed": seed}),
            "train": cfg.train.model_copy(update={"seed": seed}),
        }
    )


def sample_pool(
    ds: Dataset,
    strategy: str,
    budget: int | float,
    cfg: RunConfig,
    reward_model: RewardModel | None = None,
    episode_log: str | Path | None = None,
) -> tuple[list[int], PredictorTrainer | None]:
    """Pool of ``budget`` spot ids (a count, or a ratio of ``len(ds)``) chosen by ``strategy``.

    With interleaved co-training the SCRL strategy also returns the trainer
    that was advanced between rounds.
    """
    count = resolve_budget(budget, len(ds))
    if strategy == "random":
        return random_sampler(ds.spot_ids, count, seed=cfg.baseline.seed), None
    if strategy == "diversity":
        return diversity_sampler(ds.features, ds.spot_ids, count, cfg.baseline, seed=cfg.baseline.seed), None
    if strategy == "uncertainty":
        return uncertainty_pool(ds, count, cfg.baseline, cfg.train), None
    if strategy != "scrl":
        raise ConfigError(f"unknown strategy {strategy!r}")

    model = reward_model or RewardModel.from_dataset(ds, cfg.reward)
    sampler = ActiveSampler(
        ds, cfg.sampler.model_copy(update={"budget": budget}), model, episode_log=episode_log
    )
    interleave = cfg.sampler.interleave_epochs
    if interleave == 0:
        return sampler.run().pool, None
    trainer = PredictorTrainer(
        ds, cfg.train, total_epochs=len(sampler.sizes) * interleave + cfg.train.epochs
    )
    while not sampler.done:
        sampler.step()
        trainer.fit(sampler.pool, interleave)
    return list(sampler.pool), trainer


def run_cell(ds: Dataset, cell: SweepCell, cfg: RunConfig) -> SweepRow:
    """Run one sweep cell on a fresh view of the dataset."""
    cfg = _seeded(cfg, cell.seed)
    split = crossval_split(ds.slide_ids, cfg.sweep.folds, cfg.sweep.split_seed)
    train_ids, test_ids = fold_spot_ids(ds, split, cell.fold)
    train_ds = ds.subset(train_ids)

    reward_model = RewardModel.from_dataset(train_ds, cfg.reward)
    pool, trainer = sample_pool(train_ds, cell.strategy, cell.ratio, cfg, reward_model)
    model = trainer.fit(pool) if trainer is not None else train(train_ds, pool, cfg.train)
    scores = evaluate(model, ds, test_ids)
    return SweepRow(
        strategy=cell.strategy,
        ratio=cell.ratio,
        fold=cell.fold,
        seed=cell.seed,
        final_reward=reward_model.score_ids(train_ds, pool).combined,
        planted_coverage=planted_type_coverage(train_ds, pool),
        pool_size=len(pool),
        **scores.model_dump(),
    )


def _run_cell_safely(ds: Dataset, cell: SweepCell, cfg: RunConfig) -> SweepRow:
    try:
        return run_cell(ds, cell, cfg)
    except Exception as e:  # a failed cell must not stop the sweep
        logger.exception("Sweep cell failed", **cell.model_dump())
        return SweepRow(
            **cell.model_dump(), status="failed", error=f"{type(e).__name__}: {e}"
        )


def _run_cell_from_dir(data_dir: str, cell: SweepCell, cfg: RunConfig) -> SweepRow:
    ds = load_dataset(data_dir, normalize_coordinates=cfg.data.normalize_coordinates)
    return _run_cell_safely(ds, cell, cfg)


def sweep_cells(cfg: RunConfig) -> Iterator[SweepCell]:
    for fold, strategy, ratio, seed in product(
        range(cfg.sweep.folds), cfg.sweep.strategies, cfg.sweep.ratios, cfg.sweep.seeds
    ):
        yield SweepCell(fold=fold, strategy=strategy, ratio=ratio, seed=seed)


def budget_sweep(
    ds: Dataset,
    cfg: RunConfig,
    out_dir: str | Path,
    data_dir: str | Path | None = None,
) -> SweepReport:
    """Run every pending sweep cell and return the report of all cells.

    Cells already completed under the same configuration hash are skipped.
    Parallel workers (``sweep.workers`` capped by ``SCRL_THREADS``) need
    ``data_dir`` so each process can load its own dataset copy.
    """
    out = Path(out_dir)
    log_path = out / CELLS_FILE
    digest = config_hash(cfg)
    done = {
        rec["key"]: rec
        for rec in read_jsonl(log_path)
        if rec.get("config_hash") == digest and rec.get("status") == "ok"
    }
    pending = [c for c in sweep_cells(cfg) if c.key(digest) not in done]
    workers = cfg.worker_count()
    logger.info(
        "Sweep started",
        cells=len(pending) + len(done),
        pending=len(pending),
        resumed=len(done),
        workers=workers,
    )

    def record(cell: SweepCell, row: SweepRow) -> None:
        rec: dict[str, Any] = {"key": cell.key(digest), "config_hash": digest, **row.model_dump()}
        append_jsonl(log_path, rec)
        done[rec["key"]] = rec
        logger.info("Sweep cell finished", **row.model_dump(exclude={"error"}))

    if workers > 1 and data_dir is not None and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(_run_cell_from_dir, str(data_dir), c, cfg): c for c in pending}
            for future in as_completed(futures):
                cell = futures[future]
                try:
                    row = future.result()
                except Exception as e:  # a crashed worker fails its cells, not the sweep
                    logger.exception("Sweep worker failed", **cell.model_dump())
                    row = SweepRow(
                        **cell.model_dump(), status="failed", error=f"{type(e).__name__}: {e}"
                    )
                record(cell, row)
    else:
        for cell in pending:
            record(cell, _run_cell_safely(ds, cell, cfg))

    rows = []
    for cell in sweep_cells(cfg):
        rec = done.get(cell.key(digest))
        if rec is not None:
            rows.append(SweepRow.model_validate({k: rec[k] for k in SweepRow.model_fields if k in rec}))
    return SweepReport(rows=rows)


def report_frame(report: SweepReport, columns: list[str] | None = None) -> pd.DataFrame:
    """Report rows as a frame; all row fields unless ``columns`` is given."""
    frame = pd.DataFrame([row.model_dump() for row in report.rows])
    return frame if columns is None else frame.reindex(columns=columns)


def summarize(frame: pd.DataFrame) -> list[dict[str, Any]]:
    """Mean and (population) standard deviation per (strategy, ratio) over ok rows."""
    ok = frame[frame["status"] == "ok"]
    groups = []
    for (strategy, ratio), block in ok.groupby(["strategy", "ratio"], sort=True):
        entry: dict[str, Any] = {"strategy": strategy, "ratio": float(ratio), "n": len(block)}
        for column in SUMMARY_METRICS:
            if column not in block or block[column].isna().all():
                continue
            values = block[column].to_numpy(dtype=np.float64)
            entry[f"{column}_mean"] = float(values.mean())
            entry[f"{column}_std"] = float(values.std())
        groups.append(entry)
    return groups


def write_report(report: SweepReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``summary.json``.

    Raises:
        ConfigError: the report has no rows.
    """
    if not report.rows:
        raise ConfigError("cannot write an empty report")
    out = Path(out_dir)
    frame = report_frame(report)
    buffer = io.StringIO()
    frame[REPORT_COLUMNS].to_csv(buffer, index=False, lineterminator="\n")
    csv_path = out / REPORT_FILE
    atomic_write_bytes(csv_path, buffer.getvalue().encode("utf-8"))

    summary = {
        "pcc_axis": PCC_AXIS_NOTE,
        "columns": REPORT_COLUMNS,
        "cells": len(frame),
        "failed": int((frame["status"] == "failed").sum()),
        "groups": summarize(frame),
    }
    summary_path = out / SUMMARY_FILE
    atomic_write_json(summary_path, summary)
    logger.info("Report written", path=str(csv_path), rows=len(frame))
    return csv_path, summary_path


