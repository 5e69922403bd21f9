"""scrl-st - single-cell guided active sampling for spatial transcriptomics.

This package selects which tissue spots to sequence under a budget, using a
policy trained with a single-cell-prior reward, and predicts gene expression
from image features with a retrieval-augmented regressor.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("scrl-st")
except PackageNotFoundError:  # pragma: no cover - source tree without install
    __version__ = "0.0.0+unknown"

__license__ = "MIT"

from .config import RunConfig, load_run_config
from .dataset import Dataset, load_dataset
from .harness import budget_sweep, metrics, write_report
from .policy import run_active_sampling
from .predictor import predict, train
from .synthgen import generate

__all__ = [
    "Dataset",
    "RunConfig",
    "budget_sweep",
    "generate",
    "load_dataset",
    "load_run_config",
    "metrics",
    "predict",
    "run_active_sampling",
    "train",
    "write_report",
]
