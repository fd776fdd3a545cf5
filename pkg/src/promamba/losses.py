"""Training objective (Dice + alpha * Focal) and Dice/IoU evaluation metrics.

Dice operates on probabilities; Focal is computed from logits in log-sigmoid
form so that |logit| = 100 stays finite in value and gradient.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from promamba import tensor as T
from promamba.config import LossConfig
from promamba.tensor import ContractError, DimensionError, Tensor


def _check_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def dice_loss(pred_prob: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """Soft Dice complement: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    _check_shapes("dice_loss", pred_prob, target)
    epsc = Tensor(np.asarray(eps), pred_prob.dtype)
    two = Tensor(np.asarray(2.0), pred_prob.dtype)
    one = Tensor(np.asarray(1.0), pred_prob.dtype)
    inter = T.tsum(T.mul(pred_prob, target))
    denom = T.add(T.add(T.tsum(pred_prob), T.tsum(target)), epsc)
    return T.sub(one, T.div(T.add(T.mul(two, inter), epsc), denom))


def focal_loss(
    pred_logit: Tensor, target: Tensor, gamma: float = 2.0, focal_alpha_t: float = 0.25
) -> Tensor:
    """Mean of -alpha_t * (1 - p_t)**gamma * log(p_t) over pixels.

    With s = +1 for foreground and -1 for background pixels,
    log(p_t) = -softplus(-s*z) and (1 - p_t)**gamma = exp(-gamma*softplus(s*z)),
    which stays stable for large |z|.
    """
    _check_shapes("focal_loss", pred_logit, target)
    dtype = pred_logit.dtype
    sign = Tensor(2.0 * target.data - 1.0, dtype)  # +1 fg, -1 bg
    alpha = Tensor(
        np.where(target.data > 0.5, focal_alpha_t, 1.0 - focal_alpha_t).astype(pred_logit.data.dtype),
        dtype,
    )
    sz = T.mul(sign, pred_logit)
    ce = T.softplus(T.neg(sz))  # -log(p_t)
    mod = T.texp(T.mul(Tensor(np.asarray(-gamma), dtype), T.softplus(sz)))
    return T.tmean(T.mul(alpha, T.mul(mod, ce)))


def combined_loss(pred_logit: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    """dice_loss(sigmoid(z)) + alpha * focal_loss(z)."""
    _check_shapes("combined_loss", pred_logit, target)
    dice = dice_loss(T.sigmoid(pred_logit), target, cfg.eps)
    focal = focal_loss(pred_logit, target, cfg.gamma, cfg.focal_alpha_t)
    return T.add(dice, T.mul(Tensor(np.asarray(cfg.alpha), pred_logit.dtype), focal))


# --- evaluation metrics (plain numpy, no gradients) -----------------------------


def _binarize(pred_logit: np.ndarray, threshold: float) -> np.ndarray:
    prob = 1.0 / (1.0 + np.exp(-np.clip(pred_logit, -60, 60)))
    return prob > threshold


def dice_metric(pred_logit: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """2|P&T| / (|P|+|T|) after binarizing at the threshold; 1.0 if both empty."""
    if pred_logit.shape != target.shape:
        raise DimensionError(f"dice_metric: shapes differ, {pred_logit.shape} vs {target.shape}")
    p = _binarize(pred_logit, threshold)
    t = target > 0.5
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def iou_metric(pred_logit: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """|P&T| / |P or T| after binarizing at the threshold; 1.0 if both empty."""
    if pred_logit.shape != target.shape:
        raise DimensionError(f"iou_metric: shapes differ, {pred_logit.shape} vs {target.shape}")
    p = _binarize(pred_logit, threshold)
    t = target > 0.5
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def aggregate_metrics(per_dataset: Mapping[str, Sequence[float]]) -> tuple[dict[str, float], float]:
    """Arithmetic mean per dataset, then an unweighted mean over datasets."""
    if not per_dataset:
        raise ContractError("aggregate_metrics needs at least one dataset")
    means: dict[str, float] = {}
    for name, values in per_dataset.items():
        if len(values) == 0:
            raise ContractError(f"dataset {name!r} has no values")
        means[name] = float(np.mean(values))
    grand = float(np.mean(list(means.values())))
    return means, grand
