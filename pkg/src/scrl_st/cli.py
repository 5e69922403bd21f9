"""Command-line entry point: ``synth``, ``sample``, ``train``, ``eval`` and ``sweep``.

Every command accepts ``--config FILE`` (TOML, or a resolved-config JSON
written by an earlier run) and repeatable ``--set section.key=value``
overrides, and writes its resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import structlog
from pydantic import ValidationError

from .config import STRATEGIES, RunConfig, config_hash, configure_logging, load_run_config, parse_override, write_resolved_config
from .dataset import Dataset, load_dataset
from .errors import BudgetError, ConfigError, DataError, DimensionError, NumericError, StateError
from .harness import budget_sweep, crossval_split, evaluate, fold_spot_ids, sample_pool, write_report
from .helpers import atomic_write_json
from .predictor import load_checkpoint, save_checkpoint, train
from .synthgen import generate

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RESOLVED_CONFIG_FILE = "resolved_config.json"


def _ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid ratio {text!r}") from e
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return value


def _config_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML or resolved-config JSON file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _config_options()
    parser = argparse.ArgumentParser(
        prog="scrl-st",
        description="Single-cell guided active sampling and expression prediction",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    synth = commands.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--out", type=Path, required=True)

    sample = commands.add_parser("sample", parents=[common], help="Select a pool of spots")
    sample.add_argument("--data", type=Path, required=True)
    sample.add_argument(
        "--strategy", choices=list(STRATEGIES), default=None, help="Overrides sample.strategy"
    )
    sample.add_argument("--budget", type=_ratio, default=None, help="Budget ratio in (0, 1]; overrides sampler.budget")
    sample.add_argument("--fold", type=int, default=None, help="Overrides sample.fold")
    sample.add_argument("--out", type=Path, default=Path("pool.json"))

    train_cmd = commands.add_parser("train", parents=[common], help="Train the predictor on a pool")
    train_cmd.add_argument("--data", type=Path, required=True)
    train_cmd.add_argument("--pool", type=Path, required=True)
    train_cmd.add_argument("--out", type=Path, required=True)

    eval_cmd = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a fold")
    eval_cmd.add_argument("--data", type=Path, required=True)
    eval_cmd.add_argument("--ckpt", type=Path, required=True)
    eval_cmd.add_argument("--fold", type=int, required=True)

    sweep = commands.add_parser("sweep", parents=[common], help="Run the budget sweep")
    sweep.add_argument("--data", type=Path, required=True)
    sweep.add_argument("--out", type=Path, required=True)
    return parser


def _load(args: argparse.Namespace, cfg: RunConfig) -> Dataset:
    return load_dataset(args.data, normalize_coordinates=cfg.data.normalize_coordinates)


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    root = generate(cfg.synth, args.out)
    write_resolved_config(cfg, root / RESOLVED_CONFIG_FILE)
    return EXIT_OK


def _with_sample_flags(args: argparse.Namespace, cfg: RunConfig) -> RunConfig:
    """Fold the flags into ``cfg`` so the resolved config alone reproduces the pool."""
    sample = cfg.sample.model_copy(
        update={
            key: value
            for key, value in (("strategy", args.strategy), ("fold", args.fold))
            if value is not None
        }
    )
    sampler = cfg.sampler
    if args.budget is not None:
        sampler = sampler.model_copy(update={"budget": args.budget})
    return cfg.model_copy(update={"sample": sample, "sampler": sampler})


def cmd_sample(args: argparse.Namespace, cfg: RunConfig) -> int:
    cfg = _with_sample_flags(args, cfg)
    strategy, fold, budget = cfg.sample.strategy, cfg.sample.fold, cfg.sampler.budget
    ds = _load(args, cfg)
    if fold is not None:
        split = crossval_split(ds.slide_ids, cfg.sweep.folds, cfg.sweep.split_seed)
        train_ids, _ = fold_spot_ids(ds, split, fold)
        ds = ds.subset(train_ids)
    out: Path = args.out
    episode_log = out.with_name(f"{out.stem}.episodes.jsonl")
    episode_log.unlink(missing_ok=True)
    pool, _ = sample_pool(
        ds,
        strategy,
        budget,
        cfg,
        episode_log=episode_log if strategy == "scrl" else None,
    )
    episodes = []
    if episode_log.exists():
        episodes = [json.loads(line) for line in episode_log.read_text(encoding="utf-8").splitlines()]
    atomic_write_json(
        out,
        {
            "strategy": strategy,
            "budget": budget,
            "fold": fold,
            "spot_ids": sorted(pool),
            "episodes": episodes,
            "config_hash": config_hash(cfg),
        },
    )
    write_resolved_config(cfg, out.with_name(f"{out.stem}.config.json"))
    logger.info("Pool written", path=str(out), size=len(pool), strategy=strategy)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args, cfg)
    try:
        pool = json.loads(args.pool.read_text(encoding="utf-8"))["spot_ids"]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"{args.pool}: not a pool file ({e})") from e
    model = train(ds, pool, cfg.train)
    save_checkpoint(model, args.out, cfg.train, config_hash(cfg))
    write_resolved_config(cfg, args.out / RESOLVED_CONFIG_FILE)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args, cfg)
    model, _ = load_checkpoint(args.ckpt)
    if model.feature_dim != ds.feature_dim or model.gene_count != ds.gene_count:
        raise DimensionError(
            f"checkpoint maps {model.feature_dim} features to {model.gene_count} genes, "
            f"dataset has {ds.feature_dim} and {ds.gene_count}"
        )
    split = crossval_split(ds.slide_ids, cfg.sweep.folds, cfg.sweep.split_seed)
    _, test_ids = fold_spot_ids(ds, split, args.fold)
    result = {"fold": args.fold, "spots": len(test_ids), **evaluate(model, ds, test_ids).model_dump()}
    atomic_write_json(args.ckpt / f"eval_fold{args.fold}.json", result)
    write_resolved_config(cfg, args.ckpt / f"eval_fold{args.fold}.config.json")
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args, cfg)
    write_resolved_config(cfg, args.out / RESOLVED_CONFIG_FILE)
    report = budget_sweep(ds, cfg, args.out, data_dir=args.data)
    write_report(report, args.out)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _fail(code: int, message: str) -> int:
    sys.stderr.write(f"scrl-st: error: {message}\n")
    return code


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        overrides = dict(parse_override(text) for text in args.overrides)
        cfg = load_run_config(args.config, overrides)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    configure_logging(cfg.logging)
    logger.info("Command started", command=args.command, config_hash=config_hash(cfg))

    try:
        code = COMMANDS[args.command](args, cfg)
    except (ConfigError, ValidationError, BudgetError, StateError) as e:
        return _fail(EXIT_CONFIG, str(e))
    except NumericError as e:
        return _fail(EXIT_NUMERIC, str(e))
    except (DataError, DimensionError, FileNotFoundError, KeyError, ValueError) as e:
        return _fail(EXIT_DATA, str(e))
    logger.info("Command finished", command=args.command, exit_code=code)
    return code


def main() -> None:
    """Run the console script."""
    sys.exit(dispatch(sys.argv[1:]))
