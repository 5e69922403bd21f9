"""Retrieval-augmented expression predictor.

A regression network maps image features to expression. Two projection
heads align image features and expressions contrastively; the aligned
expression embeddings of the training pool form a memory bank whose
retrieved neighbours give a soft target that the regression output is
distilled toward.

Every epoch trains the heads first, then rebuilds the bank, then trains the
regression network against the frozen bank.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import structlog
from pydantic import BaseModel

from .config import TrainConfig
from .dataset import Dataset
from .errors import DimensionError, FormatError, StateError
from .helpers import atomic_write_json
from .layers import PARAM_NAMES, Mlp, SgdMomentum, cosine_lr
from .losses import LossBreakdown, infonce_loss_grad, total_loss_grad
from .matrix_io import load_matrix, save_matrix
from .numerics import FloatArray
from .retrieval import MemoryBank, effective_k, retrieval_targets
from .rewards import assign_cell_types, fit_width

logger = structlog.get_logger(__name__)

MANIFEST_FILE = "manifest.json"
STORED_DTYPE = np.float32


class EpochLog(BaseModel):
    """Mean losses over one epoch."""

    epoch: int
    lr: float
    contrastive: float | None
    mse: float
    pcc: float
    distill: float
    total: float


@dataclass
class PredictorModel:
    """Regression network, projection heads and the last memory bank."""

    regressor: Mlp
    img_head: Mlp | None = None
    expr_head: Mlp | None = None
    bank: MemoryBank | None = None
    trained: bool = False
    history: list[EpochLog] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.regressor.in_dim

    @property
    def gene_count(self) -> int:
        return self.regressor.out_dim

    def networks(self) -> dict[str, Mlp]:
        nets = {"regressor": self.regressor, "img_head": self.img_head, "expr_head": self.expr_head}
        return {name: net for name, net in nets.items() if net is not None}


def regress(net: Mlp, features: npt.ArrayLike) -> FloatArray:
    """Deterministic regression forward pass; a single vector gives one row."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f.reshape(1, -1)
    if f.shape[1] != net.in_dim:
        raise DimensionError(f"expected {net.in_dim} features, got {f.shape[1]}")
    out = net(f)
    return out[0] if single else out


def stored_precision(net: Mlp) -> Mlp:
    """Copy of ``net`` with every parameter rounded to checkpoint precision."""
    return Mlp(**{k: v.astype(STORED_DTYPE).astype(np.float64) for k, v in net.params().items()})


def predict(model: PredictorModel, features: npt.ArrayLike) -> FloatArray:
    """Predicted expression per feature row.

    The regressor is evaluated at checkpoint precision, so a model and its
    reloaded checkpoint predict the same values.

    Raises:
        StateError: the model has not been trained.
    """
    if not model.trained:
        raise StateError("predictor has not been trained")
    return regress(
        stored_precision(model.regressor), np.atleast_2d(np.asarray(features, dtype=np.float64))
    )


def _batches(order: npt.NDArray[np.int64], size: int) -> list[npt.NDArray[np.int64]]:
    return [order[i : i + size] for i in range(0, order.size, size)]


class PredictorTrainer:
    """Owns the networks, optimizer and RNG streams across epochs.

    :meth:`fit` may be called repeatedly (with a growing pool) and continues
    the same optimizer state and cosine schedule over ``total_epochs``.
    """

    def __init__(self, ds: Dataset, cfg: TrainConfig, total_epochs: int | None = None) -> None:
        self.ds = ds
        self.cfg = cfg
        self.total_epochs = total_epochs or cfg.epochs
        reg_init, head_init, reg_order, head_order = np.random.SeedSequence(cfg.seed).spawn(4)
        self.reg_rng = np.random.default_rng(reg_order)
        self.head_rng = np.random.default_rng(head_order)
        self.optimizer = SgdMomentum(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        d, g = ds.feature_dim, ds.gene_count
        regressor = Mlp.init(d, cfg.hidden, g, np.random.default_rng(reg_init))
        regressor.w2[:] = 0.0
        self.model = PredictorModel(regressor=regressor)
        if cfg.use_retrieval:
            rng = np.random.default_rng(head_init)
            self.model.img_head = Mlp.init(d, cfg.proj_dim, cfg.proj_dim, rng)
            self.model.expr_head = Mlp.init(g, cfg.proj_dim, cfg.proj_dim, rng)
        self.epoch = 0
        self._clip_logged = False

    def _head_epoch(self, feats: FloatArray, expr: FloatArray, lr: float) -> float:
        img_head, expr_head = self.model.img_head, self.model.expr_head
        if img_head is None or expr_head is None:
            raise StateError("projection heads are disabled")
        order = self.head_rng.permutation(feats.shape[0])
        total = 0.0
        for batch in _batches(order, self.cfg.batch_size):
            a, cache_a = img_head.forward(feats[batch])
            b, cache_b = expr_head.forward(expr[batch])
            loss, g_a, g_b = infonce_loss_grad(a, b, self.cfg.temperature)
            grads_a, _ = img_head.backward(cache_a, g_a)
            grads_b, _ = expr_head.backward(cache_b, g_b)
            self.optimizer.step("img_head", img_head, grads_a, lr)
            self.optimizer.step("expr_head", expr_head, grads_b, lr)
            total += loss * batch.size
        return total / feats.shape[0]

    def build_bank(self, pool_ids: npt.NDArray[np.int64]) -> MemoryBank:
        """Project the pool's expressions and type them against the reference."""
        if self.model.expr_head is None:
            raise StateError("projection heads are disabled")
        rows = self.ds.index_of(pool_ids)
        expr = np.asarray(self.ds.expressions[rows], dtype=np.float64)
        ref_width = np.asarray(self.ds.reference.embeddings).shape[1]
        z = (
            fit_width(expr, ref_width)
            if self.ds.expr_embeddings is None
            else np.asarray(self.ds.expr_embeddings[rows], dtype=np.float64)
        )
        return MemoryBank(
            spot_ids=np.asarray(pool_ids, dtype=np.int64),
            embeddings=self.model.expr_head(expr),
            expressions=expr,
            cell_types=assign_cell_types(z, self.ds.reference),
        )

    def _regressor_epoch(
        self, ids: npt.NDArray[np.int64], feats: FloatArray, expr: FloatArray, lr: float
    ) -> LossBreakdown:
        net = self.model.regressor
        bank = self.model.bank
        order = self.reg_rng.permutation(feats.shape[0])
        sums = dict.fromkeys(("mse", "pcc", "distill", "total"), 0.0)
        for batch in _batches(order, self.cfg.batch_size):
            yhat, cache = net.forward(feats[batch])
            yret = mean_sim = None
            if bank is not None and self.model.img_head is not None:
                queries = self.model.img_head(feats[batch])
                yret, mean_sim = retrieval_targets(queries, ids[batch], bank, self.cfg)
            parts, grad = total_loss_grad(expr[batch], yhat, yret, mean_sim, self.cfg)
            grads, _ = net.backward(cache, grad)
            self.optimizer.step("regressor", net, grads, lr)
            for key in sums:
                sums[key] += getattr(parts, key) * batch.size
        n = feats.shape[0]
        return LossBreakdown(**{key: value / n for key, value in sums.items()})

    def fit(self, pool_ids: npt.ArrayLike, epochs: int | None = None) -> PredictorModel:
        """Train for ``epochs`` more epochs (default: the configured count) on the pool.

        Raises:
            StateError: the pool is empty.
        """
        ids = np.asarray(sorted(int(i) for i in np.asarray(pool_ids).ravel()), dtype=np.int64)
        if ids.size == 0:
            raise StateError("cannot train on an empty pool")
        self.ds.reveal(ids)
        rows = self.ds.index_of(ids)
        feats = np.asarray(self.ds.features[rows], dtype=np.float64)
        expr = np.asarray(self.ds.expressions[rows], dtype=np.float64)
        if self.epoch == 0:
            # Training starts from the pool-mean predictor.
            self.model.regressor.b2[:] = expr.mean(axis=0)

        if self.cfg.use_retrieval and not self._clip_logged:
            k_eff = effective_k(self.cfg.top_k, ids.size, leave_one_out=True)
            if k_eff < self.cfg.top_k:
                logger.warning(
                    "Retrieval K clipped", requested=self.cfg.top_k, used=k_eff, pool=int(ids.size)
                )
                self._clip_logged = True

        for _ in range(epochs if epochs is not None else self.cfg.epochs):
            lr = cosine_lr(self.epoch, self.total_epochs, self.cfg.lr0, self.cfg.lr_min)
            contrastive = None
            if self.cfg.use_retrieval:
                contrastive = self._head_epoch(feats, expr, lr)
                self.model.bank = self.build_bank(ids)
            parts = self._regressor_epoch(ids, feats, expr, lr)
            entry = EpochLog(epoch=self.epoch, lr=lr, contrastive=contrastive, **parts.model_dump())
            self.model.history.append(entry)
            logger.info("Training epoch", pool=int(ids.size), **entry.model_dump())
            self.epoch += 1

        self.model.trained = True
        return self.model


def train(ds: Dataset, pool_ids: npt.ArrayLike, cfg: TrainConfig) -> PredictorModel:
    """Train a predictor on the pool for ``cfg.epochs`` epochs."""
    return PredictorTrainer(ds, cfg).fit(pool_ids)


def save_checkpoint(
    model: PredictorModel,
    directory: str | Path,
    cfg: TrainConfig,
    config_digest: str,
) -> Path:
    """Write every network parameter as an SCRM matrix plus a JSON manifest."""
    if not model.trained:
        raise StateError("refusing to checkpoint an untrained predictor")
    root = Path(directory)
    shapes: dict[str, dict[str, list[int]]] = {}
    for name, net in model.networks().items():
        shapes[name] = {}
        for param, value in net.params().items():
            save_matrix(np.atleast_2d(value).astype(STORED_DTYPE), root / f"{name}.{param}.scrm")
            shapes[name][param] = list(value.shape)
    manifest: dict[str, Any] = {
        "shapes": shapes,
        "feature_dim": model.feature_dim,
        "gene_count": model.gene_count,
        "hyperparameters": cfg.model_dump(mode="json"),
        "config_hash": config_digest,
        "epochs": len(model.history),
        "dtype": np.dtype(STORED_DTYPE).name,
    }
    atomic_write_json(root / MANIFEST_FILE, manifest)
    logger.info("Checkpoint written", path=str(root), networks=sorted(shapes))
    return root


def load_checkpoint(directory: str | Path) -> tuple[PredictorModel, dict[str, Any]]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Raises:
        FormatError: the manifest and the stored matrices disagree.
    """
    root = Path(directory)
    manifest = json.loads((root / MANIFEST_FILE).read_text(encoding="utf-8"))
    nets: dict[str, Mlp] = {}
    for name, params in manifest["shapes"].items():
        values = {}
        for param in PARAM_NAMES:
            shape = tuple(params[param])
            stored = load_matrix(root / f"{name}.{param}.scrm").astype(np.float64)
            if stored.size != int(np.prod(shape)):
                raise FormatError(f"{name}.{param}: stored size differs from manifest {shape}")
            values[param] = stored.reshape(shape)
        nets[name] = Mlp(**values)
    if "regressor" not in nets:
        raise FormatError(f"{root}: checkpoint has no regressor")
    model = PredictorModel(
        regressor=nets["regressor"],
        img_head=nets.get("img_head"),
        expr_head=nets.get("expr_head"),
        trained=True,
    )
    return model, manifest
