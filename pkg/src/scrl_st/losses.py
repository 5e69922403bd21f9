"""Training objectives of the expression predictor, each with its gradient.

Squared-error terms are averaged over genes (and over the batch) so the loss
weights do not depend on the gene count.
"""

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict

from .config import TrainConfig
from .errors import DimensionError
from .numerics import ZERO_NORM, FloatArray


class LossBreakdown(BaseModel):
    """Weighted total and its unweighted-except-distill components."""

    model_config = ConfigDict(frozen=True)

    mse: float
    pcc: float
    distill: float
    total: float


def _pair(a: npt.ArrayLike, b: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    x = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _normalize_with_grad(
    raw: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    live = norms >= ZERO_NORM
    safe = np.where(live, norms, 1.0)
    return np.where(live, raw / safe, 0.0), safe


def _unnormalize_grad(unit: FloatArray, norms: FloatArray, grad_unit: FloatArray) -> FloatArray:
    radial = (grad_unit * unit).sum(axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def infonce_loss_grad(
    img_embs: npt.ArrayLike, expr_embs: npt.ArrayLike, temperature: float = 0.07
) -> tuple[float, FloatArray, FloatArray]:
    """Symmetric InfoNCE over cosine logits, with gradients for both inputs.

    Row ``i`` of each side is the positive pair; the loss is the mean of the
    image-to-expression and expression-to-image cross-entropies.
    """
    a_raw, b_raw = _pair(img_embs, expr_embs)
    n = a_raw.shape[0]
    a, a_norm = _normalize_with_grad(a_raw)
    b, b_norm = _normalize_with_grad(b_raw)
    logits = a @ b.T / temperature

    row_shift = logits - logits.max(axis=1, keepdims=True)
    row_log = row_shift - np.log(np.exp(row_shift).sum(axis=1, keepdims=True))
    col_shift = logits - logits.max(axis=0, keepdims=True)
    col_log = col_shift - np.log(np.exp(col_shift).sum(axis=0, keepdims=True))
    diag = np.arange(n)
    loss = 0.5 * (-row_log[diag, diag].mean() - col_log[diag, diag].mean())

    eye = np.eye(n)
    g_logits = 0.5 * ((np.exp(row_log) - eye) + (np.exp(col_log) - eye)) / n
    g_a = g_logits @ b / temperature
    g_b = g_logits.T @ a / temperature
    return (
        float(loss),
        _unnormalize_grad(a, a_norm, g_a),
        _unnormalize_grad(b, b_norm, g_b),
    )


def infonce_loss(
    img_embs: npt.ArrayLike, expr_embs: npt.ArrayLike, temperature: float = 0.07
) -> float:
    return infonce_loss_grad(img_embs, expr_embs, temperature)[0]


def _pcc_rows(y: FloatArray, yhat: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Per-row PCC and its gradient with respect to ``yhat`` (0 for constant rows)."""
    yc = y - y.mean(axis=1, keepdims=True)
    hc = yhat - yhat.mean(axis=1, keepdims=True)
    ny = np.linalg.norm(yc, axis=1)
    nh = np.linalg.norm(hc, axis=1)
    live = (ny >= ZERO_NORM) & (nh >= ZERO_NORM)
    sy = np.where(live, ny, 1.0)
    sh = np.where(live, nh, 1.0)
    pcc = np.where(live, (yc * hc).sum(axis=1) / (sy * sh), 0.0)
    pcc = np.clip(pcc, -1.0, 1.0)
    grad = yc / (sy * sh)[:, None] - pcc[:, None] * hc / (sh**2)[:, None]
    return pcc, np.where(live[:, None], grad, 0.0)


def pearson_rows(y: npt.ArrayLike, yhat: npt.ArrayLike) -> FloatArray:
    """PCC per row across columns; constant rows give 0."""
    a, b = _pair(y, yhat)
    return _pcc_rows(a, b)[0]


def pcc_loss_grad(y: npt.ArrayLike, yhat: npt.ArrayLike) -> tuple[float, FloatArray]:
    a, b = _pair(y, yhat)
    if a.shape[1] < 2:
        raise DimensionError("PCC needs at least 2 genes")
    pcc, grad = _pcc_rows(a, b)
    return float((1.0 - pcc).mean()), -grad / a.shape[0]


def pcc_loss(y: npt.ArrayLike, yhat: npt.ArrayLike) -> float:
    """Mean over spots of ``1 - PCC`` across genes."""
    return pcc_loss_grad(y, yhat)[0]


def confidence_weight(mean_sim: npt.ArrayLike, threshold: float) -> FloatArray:
    """Mean retrieval similarity, zeroed below ``threshold``."""
    sims = np.asarray(mean_sim, dtype=np.float64)
    return np.where(sims >= threshold, sims, 0.0)


def distill_loss_grad(
    yhat: npt.ArrayLike,
    yret: npt.ArrayLike,
    mean_sim: npt.ArrayLike,
    cfg: TrainConfig,
) -> tuple[float, FloatArray]:
    h, r = _pair(yhat, yret)
    weight = cfg.lambda_kd * np.atleast_1d(confidence_weight(mean_sim, cfg.m_threshold))
    diff = h - r
    n, g = h.shape
    per_spot = weight * (diff**2).mean(axis=1)
    return float(per_spot.mean()), weight[:, None] * 2.0 * diff / (g * n)


def distill_loss(
    yhat: npt.ArrayLike,
    yret: npt.ArrayLike,
    mean_sim: npt.ArrayLike,
    cfg: TrainConfig,
) -> float:
    """``lambda_kd * m * mean((yhat - yret)^2)`` with the similarity-gated weight ``m``."""
    return distill_loss_grad(yhat, yret, mean_sim, cfg)[0]


def total_loss_grad(
    y: npt.ArrayLike,
    yhat: npt.ArrayLike,
    yret: npt.ArrayLike | None,
    mean_sim: npt.ArrayLike | None,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, FloatArray]:
    """Total loss breakdown and its gradient with respect to ``yhat``.

    Without a retrieved target (``yret`` is None) the distillation term is 0.
    """
    t, h = _pair(y, yhat)
    n, g = t.shape
    diff = h - t
    mse = float((diff**2).mean())
    grad = cfg.lambda_r * 2.0 * diff / (n * g)
    pcc, pcc_grad = pcc_loss_grad(t, h)
    grad = grad + cfg.lambda_p * pcc_grad
    distill = 0.0
    if yret is not None and mean_sim is not None:
        distill, kd_grad = distill_loss_grad(h, yret, mean_sim, cfg)
        grad = grad + kd_grad
    total = cfg.lambda_r * mse + cfg.lambda_p * pcc + distill
    return LossBreakdown(mse=mse, pcc=pcc, distill=distill, total=total), grad


def total_loss(
    y: npt.ArrayLike,
    yhat: npt.ArrayLike,
    yret: npt.ArrayLike | None,
    mean_sim: npt.ArrayLike | None,
    cfg: TrainConfig,
) -> LossBreakdown:
    return total_loss_grad(y, yhat, yret, mean_sim, cfg)[0]
