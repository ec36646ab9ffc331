"""Losses for mutual distillation: full-softmax CE, KL distillation, relation
prediction, and an optional N3 penalty, each with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .models import (ParamStore, Tensors, relation_backward, relation_logits,
                     scatter_add, tail_backward, tail_logits, zeros_like)

KD_DIRECTIONS = ("student_teacher", "teacher_student")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    temperature: float = 1.0
    rp_weight: float = 0.05
    n3_weight: float = 0.0
    kd_direction: str = "student_teacher"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.rp_weight < 0 or self.n3_weight < 0:
            raise ValueError("rp_weight and n3_weight must be non-negative")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"kd_direction must be one of {KD_DIRECTIONS}")


@dataclass
class LossValue:
    total: float
    components: Dict[str, float] = field(default_factory=dict)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in loss input")


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ce_rows(logits: np.ndarray, targets) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row softmax cross-entropy and its gradient w.r.t. the logits."""
    _check_finite(logits)
    logp = _log_softmax(logits)
    rows = np.arange(len(logits))
    loss = -logp[rows, targets]
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad


def kl_rows(student: np.ndarray, teacher: np.ndarray, temperature: float = 1.0,
            direction: str = "student_teacher"):
    """Per-row KL between tempered softmaxes, with gradients for both inputs.

    ``student_teacher`` is KL(S || T); ``teacher_student`` is KL(T || S).
    """
    if student.shape != teacher.shape:
        raise ValueError(f"logit shapes differ: {student.shape} vs {teacher.shape}")
    _check_finite(student, teacher)
    if direction == "teacher_student":
        loss, d_t, d_s = kl_rows(teacher, student, temperature)
        return loss, d_s, d_t
    logp = _log_softmax(student / temperature)
    logq = _log_softmax(teacher / temperature)
    p = np.exp(logp)
    diff = logp - logq
    loss = (p * diff).sum(axis=-1)
    d_student = p * (diff - loss[..., None]) / temperature
    d_teacher = (np.exp(logq) - p) / temperature
    return loss, d_student, d_teacher


def softmax_ce(logits, target: int):
    logits = np.asarray(logits, dtype=float)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} out of range")
    loss, grad = ce_rows(logits[None, :], [target])
    return float(loss[0]), grad[0]


def kl_div(student_logits, teacher_logits, temperature: float = 1.0,
           direction: str = "student_teacher"):
    s = np.asarray(student_logits, dtype=float)
    t = np.asarray(teacher_logits, dtype=float)
    loss, d_s, d_t = kl_rows(s[None, :], t[None, :], temperature, direction)
    return float(loss[0]), d_s[0], d_t[0]


def n3_reg(rows: np.ndarray):
    """Sum of cubed absolute values and its gradient."""
    rows = np.asarray(rows, dtype=float)
    a = np.abs(rows)
    return float(np.sum(a * a * a)), 3.0 * rows * a


def _factor_rows(backbone: str, h, r, t):
    if backbone == "CP":
        return (("entity_head", h), ("relation", r), ("entity_tail", t))
    return (("entity", h), ("relation", r), ("entity", t))


def _n3_term(backbone, w, batch, weight, out: Tensors) -> float:
    h, r, t = batch.T
    total = 0.0
    for name, ids in _factor_rows(backbone, h, r, t):
        value, grad = n3_reg(w[name][ids])
        total += value
        scatter_add(out[name], ids, weight * grad / len(batch))
    return total / len(batch)


def _as_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(batch) == 0:
        raise ValueError("empty batch")
    return batch


def ce_loss(batch, backbone: str, weights) -> Tuple[float, Tensors]:
    """Mean tail-prediction CE of one model and its gradient."""
    batch = _as_batch(batch)
    h, r, t = batch.T
    loss, d = ce_rows(tail_logits(backbone, weights, h, r), t)
    grads = tail_backward(backbone, weights, h, r, d / len(batch))
    return float(loss.mean()), grads


def student_loss(batch, params: ParamStore, mask, config: LossConfig,
                 student: Optional[Tensors] = None, teacher_grad: bool = True):
    """Distillation objective of the pruned model.

    Returns ``(LossValue, grad_student, grad_teacher)``. ``grad_student`` is
    taken w.r.t. the student's surviving weights (zero at pruned positions);
    ``grad_teacher`` is the partial through the KD term only, which the
    meta step differentiates. ``student`` overrides the student's raw weights
    (default: the teacher store itself, seen through ``mask``). With
    ``teacher_grad=False`` the partial is skipped and returned as ``None``.
    """
    batch = _as_batch(batch)
    n = len(batch)
    bb = params.backbone
    raw = params.tensors if student is None else student
    sw = raw if mask is None else mask.apply(raw)
    tw = params.tensors
    h, r, t = batch.T
    a = config.alpha

    s_logits = tail_logits(bb, sw, h, r)
    t_logits = tail_logits(bb, tw, h, r)
    ce, d_ce = ce_rows(s_logits, t)
    kd, d_kd_s, d_kd_t = kl_rows(s_logits, t_logits, config.temperature, config.kd_direction)
    comps = {"ce": float(ce.mean()), "kd": float(kd.mean())}

    d_student = a * d_ce / n
    grad_teacher = zeros_like(tw) if teacher_grad else None
    if a < 1.0:
        d_student += (1.0 - a) * d_kd_s / n
        if teacher_grad:
            tail_backward(bb, tw, h, r, (1.0 - a) * d_kd_t / n, out=grad_teacher)
    grad_student = tail_backward(bb, sw, h, r, d_student)

    total = a * comps["ce"] + (1.0 - a) * comps["kd"]
    if config.rp_weight > 0:
        rp, d_rp = ce_rows(relation_logits(bb, sw, h, t), r)
        relation_backward(bb, sw, h, t, config.rp_weight * d_rp / n, out=grad_student)
        comps["rp"] = float(rp.mean())
        total += config.rp_weight * comps["rp"]
    if config.n3_weight > 0:
        comps["n3"] = _n3_term(bb, sw, batch, config.n3_weight, grad_student)
        total += config.n3_weight * comps["n3"]
    if mask is not None:
        grad_student = mask.apply(grad_student)
    return LossValue(float(total), comps), grad_student, grad_teacher


def kd_teacher_grad(batch, params: ParamStore, mask, config: LossConfig,
                    student: Optional[Tensors] = None) -> Tensors:
    """Teacher partial of the student objective (the KD term only).

    Equals the third output of :func:`student_loss` at a fraction of the cost;
    the meta step evaluates it twice per batch.
    """
    batch = _as_batch(batch)
    tw = params.tensors
    grad = zeros_like(tw)
    if config.alpha >= 1.0:
        return grad
    bb = params.backbone
    raw = params.tensors if student is None else student
    sw = raw if mask is None else mask.apply(raw)
    h, r, _ = batch.T
    _, _, d_t = kl_rows(tail_logits(bb, sw, h, r), tail_logits(bb, tw, h, r),
                        config.temperature, config.kd_direction)
    return tail_backward(bb, tw, h, r, (1.0 - config.alpha) * d_t / len(batch), out=grad)


def teacher_loss(batch, params: ParamStore, mask, config: LossConfig,
                 student: Optional[Tensors] = None):
    """Mutual-learning objective of the dense model; student outputs are constants."""
    batch = _as_batch(batch)
    n = len(batch)
    bb = params.backbone
    raw = params.tensors if student is None else student
    sw = raw if mask is None else mask.apply(raw)
    tw = params.tensors
    h, r, t = batch.T
    b = config.beta

    t_logits = tail_logits(bb, tw, h, r)
    s_logits = tail_logits(bb, sw, h, r)
    ce, d_ce = ce_rows(t_logits, t)
    kd, _, d_kd_t = kl_rows(s_logits, t_logits, config.temperature, config.kd_direction)
    comps = {"ce": float(ce.mean()), "kd": float(kd.mean())}

    d_teacher = b * d_ce / n
    if b < 1.0:
        d_teacher += (1.0 - b) * d_kd_t / n
    grad = tail_backward(bb, tw, h, r, d_teacher)

    total = b * comps["ce"] + (1.0 - b) * comps["kd"]
    if config.rp_weight > 0:
        rp, d_rp = ce_rows(relation_logits(bb, tw, h, t), r)
        relation_backward(bb, tw, h, t, config.rp_weight * d_rp / n, out=grad)
        comps["rp"] = float(rp.mean())
        total += config.rp_weight * comps["rp"]
    if config.n3_weight > 0:
        comps["n3"] = _n3_term(bb, tw, batch, config.n3_weight, grad)
        total += config.n3_weight * comps["n3"]
    return LossValue(float(total), comps), grad
