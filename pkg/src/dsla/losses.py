"""Classification and regression losses with analytic logit gradients.

Every ``*_gpart`` function returns ``d loss / d logit`` where the predicted
probability is ``p = sigmoid(logit)``, i.e. the derivative with respect to
``p`` multiplied by ``p (1 - p)``. All functions accept scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

EPS = 1e-12


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class GPoint:
    p: float
    g_a: float
    g_b: float
    g_gfl: tuple[float, ...]


def _check_prob(p, name="p"):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError(f"{name} must lie in the open interval (0, 1)")
    return p


def _check_target(y):
    y = np.asarray(y, dtype=float)
    if np.any(~((y >= 0) & (y <= 1))):
        raise ValueError("target must lie in [0, 1]")
    return y


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def sigmoid(z):
    return _out(expit(np.asarray(z, dtype=float)))


def focal_loss(p, is_positive, params: LossParams = LossParams()):
    """Sigmoid focal loss for a binary target."""
    p = _clamp(_check_prob(p))
    pos = np.asarray(is_positive, dtype=bool)
    a, g = params.alpha, params.gamma
    loss_pos = -a * (1.0 - p) ** g * np.log(p)
    loss_neg = -(1.0 - a) * p**g * np.log(1.0 - p)
    return _out(np.where(pos, loss_pos, loss_neg))


def focal_gpart(p, is_positive, params: LossParams = LossParams()):
    p = _clamp(_check_prob(p))
    pos = np.asarray(is_positive, dtype=bool)
    a, g = params.alpha, params.gamma
    sig = p * (1.0 - p)
    # (1-p)^(g-1) and p^(g-1) are finite on the open interval for any g >= 0
    g_pos = (a * g * (1.0 - p) ** (g - 1.0) * np.log(p) - a * (1.0 - p) ** g / p) * sig
    g_neg = (-(1.0 - a) * g * p ** (g - 1.0) * np.log(1.0 - p) + (1.0 - a) * p**g / (1.0 - p)) * sig
    return _out(np.where(pos, g_pos, g_neg))


def gfl_loss(p, y, params: LossParams = LossParams()):
    """Generalized focal loss: ``|y - p|^beta`` times binary cross-entropy."""
    p = _clamp(_check_prob(p))
    y = _check_target(y)
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return _out(np.abs(y - p) ** params.beta * bce)


def gfl_gpart(p, y, params: LossParams = LossParams()):
    p = _clamp(_check_prob(p))
    y = _check_target(y)
    beta = params.beta
    diff = y - p
    ll = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    # d|y-p|^beta/dp = -beta |y-p|^(beta-1) sign(y-p)
    with np.errstate(divide="ignore", invalid="ignore"):
        mod_grad = np.where(diff != 0, beta * np.abs(diff) ** (beta - 1.0) * np.sign(diff), 0.0)
    dldp = mod_grad * ll + np.abs(diff) ** beta * ((1.0 - y) / (1.0 - p) - y / p)
    return _out(dldp * p * (1.0 - p))


def _iou_terms(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if np.any(pred <= 0) or np.any(target <= 0):
        raise ValueError("IoU loss needs strictly positive distances")
    pl, pt, pr, pb = np.moveaxis(pred, -1, 0)
    tl, tt, tr, tb = np.moveaxis(target, -1, 0)
    iw = np.minimum(pl, tl) + np.minimum(pr, tr)
    ih = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = iw * ih
    pa = (pl + pr) * (pt + pb)
    ta = (tl + tr) * (tt + tb)
    union = pa + ta - inter
    return pred, target, iw, ih, inter, pa, union


def iou_loss(pred, target):
    """``-ln IoU`` of two boxes decoded from ltrb distances at a shared location."""
    _, _, _, _, inter, _, union = _iou_terms(pred, target)
    return _out(-np.log(np.maximum(inter / union, EPS)))


def iou_loss_grad(pred, target) -> np.ndarray:
    """Gradient of :func:`iou_loss` with respect to the predicted distances.

    At ties (``pred == target`` on a side) the intersection is treated as
    following the prediction.
    """
    pred, target, iw, ih, inter, pa, union = _iou_terms(pred, target)
    pl, pt, pr, pb = np.moveaxis(pred, -1, 0)
    tl, tt, tr, tb = np.moveaxis(target, -1, 0)
    # d inter / d side: only sides where the prediction is the binding minimum
    di = np.stack([
        np.where(pl <= tl, ih, 0.0),
        np.where(pt <= tt, iw, 0.0),
        np.where(pr <= tr, ih, 0.0),
        np.where(pb <= tb, iw, 0.0),
    ], axis=-1)
    da = np.stack([pt + pb, pl + pr, pt + pb, pl + pr], axis=-1)
    du = da - di
    return -di / inter[..., None] + du / union[..., None]


def total_loss(
    cls_targets: np.ndarray,
    positive: np.ndarray,
    p: np.ndarray,
    pred_ltrb: np.ndarray,
    target_ltrb: np.ndarray,
    params: LossParams = LossParams(),
    classification: str = "gfl",
):
    """Combined training objective over a batch of locations.

    Args:
        cls_targets: ``(N,)`` classification targets; ``label_d`` for the
            dynamic scheme, ``label_s`` for the static one, 0/1 for focal.
        positive: ``(N,)`` mask of locations with ``label_s > 0``. Sets the
            normaliser and selects the regression terms.
        p: ``(N,)`` predicted probabilities.
        pred_ltrb, target_ltrb: ``(N, 4)`` distances; only positive rows are read.
        classification: ``"gfl"`` or ``"focal"`` (binary targets).

    Returns:
        ``(loss, g_cls, g_reg)`` where ``g_cls`` is ``d loss / d logit`` per
        location and ``g_reg`` the ``(N, 4)`` gradient with respect to the
        predicted distances (zero on negatives).
    """
    cls_targets = np.asarray(cls_targets, dtype=float).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    p = np.asarray(p, dtype=float).ravel()
    pred_ltrb = np.asarray(pred_ltrb, dtype=float).reshape(-1, 4)
    target_ltrb = np.asarray(target_ltrb, dtype=float).reshape(-1, 4)
    n = len(p)
    if not (len(cls_targets) == len(positive) == n == len(pred_ltrb) == len(target_ltrb)):
        raise ValueError("targets and predictions are misaligned")
    n_pos = max(int(positive.sum()), 1)
    p = _clamp(p)
    if classification == "gfl":
        cls = gfl_loss(p, cls_targets, params)
        g_cls = gfl_gpart(p, cls_targets, params)
    elif classification == "focal":
        is_pos = cls_targets > 0.5
        cls = focal_loss(p, is_pos, params)
        g_cls = focal_gpart(p, is_pos, params)
    else:
        raise ValueError(f"unknown classification loss {classification!r}")
    scale_c = params.lambda1 / n_pos
    scale_r = params.lambda2 / n_pos
    g_reg = np.zeros((n, 4))
    reg = 0.0
    if positive.any():
        reg_terms = np.atleast_1d(iou_loss(pred_ltrb[positive], target_ltrb[positive]))
        reg = _pairwise_sum(reg_terms)
        g_reg[positive] = scale_r * iou_loss_grad(pred_ltrb[positive], target_ltrb[positive])
    loss = scale_c * _pairwise_sum(np.atleast_1d(cls)) + scale_r * reg
    return float(loss), scale_c * np.atleast_1d(g_cls), g_reg


def _pairwise_sum(values: np.ndarray) -> float:
    # np.sum reduces contiguous float arrays pairwise, so the order is fixed
    return float(np.sum(np.ascontiguousarray(values, dtype=float)))


def default_p_grid() -> np.ndarray:
    return np.round(np.arange(1, 100) * 0.01, 10)


def gpart_curves(
    p_grid: Optional[Sequence[float]] = None,
    params: LossParams = LossParams(),
    y_values: Sequence[float] = (0.5,),
) -> list[GPoint]:
    """Tabulate FL and GFL G-parts over a probability grid.

    ``g_a``/``g_b`` are the focal G-parts of a positive and a negative location;
    ``g_gfl`` holds one GFL G-part per entry of ``y_values``.
    """
    grid = default_p_grid() if p_grid is None else np.asarray(p_grid, dtype=float)
    _check_prob(grid, "p_grid")
    g_a = np.atleast_1d(focal_gpart(grid, True, params))
    g_b = np.atleast_1d(focal_gpart(grid, False, params))
    g_y = [np.atleast_1d(gfl_gpart(grid, y, params)) for y in y_values]
    return [
        GPoint(float(p), float(a), float(b), tuple(float(col[i]) for col in g_y))
        for i, (p, a, b) in enumerate(zip(grid, g_a, g_b))
    ]
