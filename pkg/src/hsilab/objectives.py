"""Training losses: focal + dice + mse mask supervision, token-distribution
distillation, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

_P_FLOOR = 1e-7
_LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class LossWeights:
    w_focal: float = 20.0
    w_dice: float = 1.0
    w_mse: float = 1.0
    lambda_dis: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("w_focal", "w_dice", "w_mse", "lambda_dis", "focal_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _target_tensor(target, like: Tensor) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != like.data.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {like.data.shape}")
    return t.astype(like.data.dtype)


def focal_loss(logits: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t), p_t floored at 1e-7."""
    t = _target_tensor(target, logits)
    p = nm.sigmoid(logits)
    p_t = nm.add(nm.mul(p, Tensor(t)), nm.mul(nm.add(-p, Tensor(np.ones_like(t))), Tensor(1.0 - t)))
    p_t = nm.clamp_min(p_t, _P_FLOOR)
    alpha_t = Tensor(alpha * t + (1.0 - alpha) * (1.0 - t))
    focus = nm.power(nm.add(-p_t, Tensor(np.ones_like(t))), gamma)
    return -(nm.mul(nm.mul(alpha_t, focus), nm.log(p_t))).mean()


def dice_loss(probs: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _target_tensor(target, probs)
    tt = Tensor(t)
    num = nm.mul(probs, tt).sum() * 2.0 + eps
    den = probs.sum() + float(t.sum()) + eps
    return 1.0 - num / den


def mse_loss(probs: Tensor, target) -> Tensor:
    """Mean squared difference between mask probabilities and the target."""
    t = _target_tensor(target, probs)
    diff = nm.add(probs, Tensor(-t))
    return nm.mul(diff, diff).mean()


def seg_loss(predictions, targets, weights: LossWeights = LossWeights()) -> Tensor:
    """Mean over masks of the weighted focal + dice + mse combination.

    `predictions` are logit tensors (or PredictedMask); `targets` are
    aligned binary grids at the same resolution."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    if not predictions:
        raise ValueError("seg_loss needs at least one mask")
    total = None
    for pred, target in zip(predictions, targets):
        logits = pred.logits if hasattr(pred, "logits") else pred
        probs = nm.sigmoid(logits)
        term = (
            focal_loss(logits, target, weights.focal_alpha, weights.focal_gamma) * weights.w_focal
            + dice_loss(probs, target) * weights.w_dice
            + mse_loss(probs, target) * weights.w_mse
        )
        total = term if total is None else total + term
    return total * (1.0 / len(predictions))


@dataclass
class DistillBatch:
    """Student grid, frozen teacher grid, and the trainable projection."""

    f_s: Tensor  # (rows, cols, j) or (n, j)
    f_t: Tensor  # (rows, cols, d_t) or (n, d_t); requires_grad must be False
    proj_w: Tensor  # (j, d_t)
    proj_b: Tensor  # (d_t,)

    def __post_init__(self):
        if self.f_t.requires_grad:
            raise ValueError("teacher features must not require gradients")
        if self.f_s.shape[:-1] != self.f_t.shape[:-1]:
            raise ValueError(f"student grid {self.f_s.shape} vs teacher grid {self.f_t.shape}")

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.f_s.shape[:-1]))


def distill_loss(batch: DistillBatch, temperature: float = 1.0) -> Tensor:
    """Mean over tokens of the cross-entropy from the teacher's channel
    distribution to the projected student's. Gradients reach the student
    and the projection only."""
    n = batch.n_tokens
    s = nm.reshape(batch.f_s, (n, batch.f_s.shape[-1]))
    t = nm.reshape(batch.f_t, (n, batch.f_t.shape[-1]))
    student_logits = nm.linear(s, batch.proj_w, batch.proj_b)
    if temperature != 1.0:
        student_logits = student_logits * (1.0 / temperature)
        t = t * (1.0 / temperature)
    log_p = nm.log(nm.clamp_min(nm.softmax(student_logits, axis=-1), _LOG_FLOOR))
    q = nm.softmax(t, axis=-1)
    return -(nm.mul(q, log_p).sum() * (1.0 / n))


def total_loss(l_seg: Tensor, l_dis: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """l_seg + lambda_dis * l_dis; lambda_dis = 0 disables distillation."""
    for term in (l_seg, l_dis):
        if not np.isfinite(term.data).all():
            raise FloatingPointError("non-finite loss term")
    return l_seg + l_dis * weights.lambda_dis


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_dis: float
    l_total: float
