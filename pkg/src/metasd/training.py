"""Self-distillation with meta learning over a single shared parameter store.

Per batch: refresh the prune mask (by policy), take a virtual SGD step of the
student, move the teacher along the hypergradient of the virtual student's
quiz loss, then update student and teacher for real.

The hypergradient of ``L_quiz(theta_S'(theta_T))`` with
``theta_S' = theta_S - lam * m * grad_S L_S(theta_S, theta_T)`` is
``-lam * d/d theta_T <grad_S L_S, v>`` with ``v = m * grad L_quiz(theta_S')``.
That mixed second derivative is obtained as a central difference of the
teacher-partial gradient of ``L_S`` at ``theta_S +/- eps * v``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .evaluation import evaluate
from .graph import SplitData, batches, build_filter_index
from .models import BACKBONES, ParamStore, Tensors, init_params, zeros_like
from .objectives import (KD_DIRECTIONS, LossConfig, ce_loss, kd_teacher_grad, student_loss,
                         teacher_loss)
from .pruning import PruneMask, compute_mask, random_mask, refresh_policy, sparsity_stats

log = logging.getLogger(__name__)

MASK_MODES = ("dynamic", "frozen", "random_frozen")
OPTIMIZERS = ("adagrad", "sgd")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backbone: str = "ComplEx"
    dim: int = 2000
    init_scale: float = 1e-3
    alpha: float = 0.5
    beta: float = 0.5
    temperature: float = 1.0
    rp_weight: float = 0.05
    n3_weight: float = 0.0
    kd_direction: str = "student_teacher"
    gamma: float = 0.9
    prune_scope: str = "global"
    mask_mode: str = "dynamic"
    refresh: str = "epoch"
    lam: float = 0.1
    mu: float = 1e-4
    epochs: int = 100
    batch_size: int = 1000
    quiz_size: int = 1000
    quiz_overlap: bool = False
    quiz_batch_size: int = 0
    hvp_epsilon_scale: float = 0.01
    meta_enabled: bool = True
    optimizer: str = "adagrad"
    adagrad_eps: float = 1e-10
    student_storage: str = "shared"
    clip_norm: float = 0.0
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 512
    threads: int = 1
    long_tail_threshold: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.lam > 0 and self.mu > 0, "lam and mu must be positive"),
            (0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)"),
            (self.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}"),
            (self.refresh in ("epoch", "step"), "refresh must be 'epoch' or 'step'"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.student_storage in ("shared", "separate"),
             "student_storage must be 'shared' or 'separate'"),
            (self.kd_direction in KD_DIRECTIONS, f"kd_direction must be one of {KD_DIRECTIONS}"),
            (self.prune_scope in ("global", "per-tensor"), "prune_scope must be global|per-tensor"),
            (self.epochs >= 0 and self.batch_size >= 1, "epochs >= 0 and batch_size >= 1"),
            (self.quiz_size >= 0 and self.quiz_batch_size >= 0, "quiz sizes must be >= 0"),
            (self.hvp_epsilon_scale > 0, "hvp_epsilon_scale must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.loss  # LossConfig validates alpha, beta, temperature, weights

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.temperature, self.rp_weight,
                          self.n3_weight, self.kd_direction)

    @property
    def effective_quiz_batch(self) -> int:
        return self.quiz_batch_size or self.batch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        coerced = {}
        for key, value in values.items():
            default = known[key].default
            if isinstance(default, bool) and isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, bool):
                value = bool(value)
            elif isinstance(default, int):
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
            coerced[key] = value
        return cls(**coerced)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class AdagradState:
    """Squared-gradient accumulators for the student and teacher update paths."""

    accumulators: Dict[str, Tensors]
    epsilon: float = 1e-10

    @classmethod
    def zeros(cls, tensors: Tensors, epsilon: float = 1e-10) -> "AdagradState":
        return cls({"student": zeros_like(tensors), "teacher": zeros_like(tensors)}, epsilon)


def _check_grads(grads: Tensors, what: str):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite {what} gradient in tensor {name!r}")


def clip_by_norm(grads: Tensors, max_norm: float) -> Tensors:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def adagrad_update(state: AdagradState, which: str, grads: Tensors, lr: float,
                   tensors: Tensors, mask: Optional[PruneMask] = None,
                   optimizer: str = "adagrad") -> None:
    """In-place update of ``tensors``; masked entries are left untouched.

    ``optimizer="sgd"`` applies ``w -= lr * g`` and leaves ``state`` alone.
    """
    _check_grads(grads, which)
    acc = state.accumulators[which] if state is not None else None
    for name, g in grads.items():
        if mask is not None:
            g = np.where(mask.bits[name], g, 0.0)
        if optimizer == "sgd":
            tensors[name] -= lr * g
            continue
        G = acc[name]
        G += g * g
        tensors[name] -= lr * g / (np.sqrt(G) + state.epsilon)


@dataclass
class VirtualStudent:
    """Look-ahead student ``theta_S' = theta_S - lam * grad`` kept beside the real weights."""

    weights: Tensors
    base: Tensors
    grad: Tensors
    batch: np.ndarray
    loss: object
    changed_rows: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class MetaResult:
    hypergradient: Tensors
    quiz_loss: float
    v_norm: float
    epsilon: float


def _student_raw(params: ParamStore, student: Optional[Tensors]) -> Tensors:
    return params.tensors if student is None else student


def virtual_train_step(params: ParamStore, mask: Optional[PruneMask], batch,
                       config: TrainConfig, student: Optional[Tensors] = None) -> VirtualStudent:
    """One plain-SGD look-ahead step of the student; real weights are not touched."""
    loss, grad_s, _ = student_loss(batch, params, mask, config.loss, student,
                                   teacher_grad=False)
    raw = _student_raw(params, student)
    base = raw if mask is None else mask.apply(raw)
    weights = {k: base[k] - config.lam * grad_s[k] for k in base}
    changed = {k: np.flatnonzero(np.any(g.reshape(g.shape[0], -1) != 0, axis=1))
               for k, g in grad_s.items()}
    return VirtualStudent(weights, base, grad_s, np.asarray(batch), loss, changed)


def hypergradient(params: ParamStore, mask: Optional[PruneMask], virtual: VirtualStudent,
                  quiz_batch, config: TrainConfig) -> MetaResult:
    """Finite-difference estimate of the teacher gradient of the virtual student's quiz CE."""
    quiz_loss, v = ce_loss(quiz_batch, params.backbone, virtual.weights)
    if mask is not None:
        v = mask.apply(v)
    zero = zeros_like(params.tensors)
    v_norm = math.sqrt(sum(float(np.vdot(g, g)) for g in v.values()))
    if config.alpha >= 1.0 or v_norm == 0.0:
        return MetaResult(zero, quiz_loss, v_norm, 0.0)
    eps = config.hvp_epsilon_scale / v_norm
    plus = {k: virtual.base[k] + eps * v[k] for k in v}
    minus = {k: virtual.base[k] - eps * v[k] for k in v}
    g_plus = kd_teacher_grad(virtual.batch, params, mask, config.loss, plus)
    g_minus = kd_teacher_grad(virtual.batch, params, mask, config.loss, minus)
    hyper = {k: -config.lam * (g_plus[k] - g_minus[k]) / (2.0 * eps) for k in g_plus}
    _check_grads(hyper, "hypervector")
    return MetaResult(hyper, quiz_loss, v_norm, eps)


def meta_train_step(params: ParamStore, mask: Optional[PruneMask], virtual: VirtualStudent,
                    quiz_batch, config: TrainConfig, opt: AdagradState) -> MetaResult:
    """Teacher update with learning rate ``mu`` along the hypergradient."""
    result = hypergradient(params, mask, virtual, quiz_batch, config)
    if result.epsilon > 0.0:
        grads = clip_by_norm(result.hypergradient, config.clip_norm)
        adagrad_update(opt, "teacher", grads, config.mu, params.tensors,
                       optimizer=config.optimizer)
    return result


def actual_train_step(params: ParamStore, mask: Optional[PruneMask], batch,
                      config: TrainConfig, opt: AdagradState,
                      student: Optional[Tensors] = None):
    """Student step on ``L_S`` (surviving weights only), then teacher step on ``L_T``."""
    loss_s, grad_s, _ = student_loss(batch, params, mask, config.loss, student,
                                     teacher_grad=False)
    grad_s = clip_by_norm(grad_s, config.clip_norm)
    adagrad_update(opt, "student", grad_s, config.lam, _student_raw(params, student), mask,
                   optimizer=config.optimizer)
    loss_t, grad_t = teacher_loss(batch, params, mask, config.loss, student)
    grad_t = clip_by_norm(grad_t, config.clip_norm)
    adagrad_update(opt, "teacher", grad_t, config.lam, params.tensors,
                   optimizer=config.optimizer)
    return loss_s, loss_t


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    config: TrainConfig
    params: ParamStore
    mask: Optional[PruneMask]
    opt: AdagradState
    student: Optional[Tensors] = None
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def rng_state(self) -> dict:
        # all random streams are keyed by (seed, epoch, step)
        return {"seed": self.config.seed, "epoch": self.epoch, "step": self.step}


def init_state(config: TrainConfig, entity_count: int, relation_count: int) -> TrainState:
    params = init_params(config.backbone, config.dim, entity_count, relation_count,
                         seed=config.seed, init_scale=config.init_scale)
    return TrainState(config, params, None, AdagradState.zeros(params.tensors, config.adagrad_eps))


def refresh_mask(state: TrainState, epoch: int, step: int) -> int:
    """Recompute the mask per the configured mode; returns the number of flipped bits."""
    cfg = state.config
    if cfg.mask_mode == "random_frozen":
        new = random_mask(state.params, cfg.gamma, seed=cfg.seed + 7919, scope=cfg.prune_scope)
    else:
        new = compute_mask(state.params, cfg.gamma, cfg.prune_scope)
    new.refreshed_at = (epoch, step)
    flipped = 0
    if state.mask is not None:
        flipped = int(sum(np.count_nonzero(state.mask.bits[k] != new.bits[k]) for k in new.bits))
    state.mask = new
    if cfg.student_storage == "separate":
        state.student = {k: v.copy() for k, v in state.params.tensors.items()}
    return flipped


def quiz_sample(quiz: np.ndarray, size: int, seed: int, epoch: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, step, 0x0051])
    return quiz[rng.integers(0, len(quiz), size=size)]


def _mean_components(records: List[dict]) -> dict:
    if not records:
        return {}
    keys = records[0].keys()
    return {k: math.fsum(r[k] for r in records) / len(records) for k in keys}


def _finite_or_raise(value: float, what: str, epoch: int, step: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} loss at epoch {epoch}, step {step}")


def train(splits: SplitData, config: TrainConfig, state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[TrainState, dict], None]] = None) -> TrainState:
    """Run (or continue) training until ``config.epochs`` epochs are done.

    ``splits`` must be reciprocal-augmented. ``on_epoch`` is called after each
    epoch with the state and the epoch's metrics record, e.g. to write
    checkpoints or metric lines.
    """
    if not splits.augmented:
        splits = splits.augment()
    if state is None:
        state = init_state(config, splits.entity_count, splits.relation_count)
    if config.meta_enabled and len(splits.quiz) == 0:
        raise ConfigError("meta learning needs a non-empty quiz set (quiz_size >= 1)")
    filt = build_filter_index(splits) if len(splits.valid) else None
    cfg = state.config = config
    params = state.params

    for epoch in range(state.epoch, cfg.epochs):
        s_records, t_records, q_losses = [], [], []
        flips = 0
        for step, batch in enumerate(batches(splits.train, cfg.batch_size, cfg.seed, epoch)):
            if refresh_policy(step, epoch, cfg) or state.mask is None:
                flips += refresh_mask(state, epoch, step)
            try:
                if cfg.meta_enabled:
                    virtual = virtual_train_step(params, state.mask, batch, cfg, state.student)
                    quiz = quiz_sample(splits.quiz, cfg.effective_quiz_batch, cfg.seed, epoch, step)
                    meta = meta_train_step(params, state.mask, virtual, quiz, cfg, state.opt)
                    q_losses.append(meta.quiz_loss)
                loss_s, loss_t = actual_train_step(params, state.mask, batch, cfg, state.opt,
                                                   state.student)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}") from exc
            _finite_or_raise(loss_s.total, "student", epoch, step)
            _finite_or_raise(loss_t.total, "teacher", epoch, step)
            s_records.append({"total": loss_s.total, **loss_s.components})
            t_records.append({"total": loss_t.total, **loss_t.components})
            state.step += 1
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")

        record = {
            "epoch": epoch,
            "step": state.step,
            "student": _mean_components(s_records),
            "teacher": _mean_components(t_records),
            "mask_flips": flips,
            "sparsity": sparsity_stats(state.mask)["sparsity"] if state.mask else 0.0,
        }
        if q_losses:
            record["quiz_ce"] = math.fsum(q_losses) / len(q_losses)
        last = epoch == cfg.epochs - 1
        if filt is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            record["valid"] = {}
            for view, m, raw in (("teacher", None, None), ("student", state.mask, state.student)):
                p = params if raw is None else params.with_tensors(raw)
                rep = evaluate(p, m, splits.valid, filt, split="valid", view=view,
                               batch_size=cfg.eval_batch_size)
                record["valid"][view] = {"mrr": rep.mrr,
                                         **{f"hits@{k}": v for k, v in rep.hits.items()}}
        state.epoch = epoch + 1
        state.history.append(record)
        log.info("epoch %d: student ce %.4f teacher ce %.4f", epoch,
                 record["student"].get("ce", float("nan")),
                 record["teacher"].get("ce", float("nan")))
        if on_epoch is not None:
            on_epoch(state, record)
    return state


def student_params(state: TrainState) -> ParamStore:
    """The student's raw store (the shared teacher store unless storage is separate)."""
    if state.student is None:
        return state.params
    return state.params.with_tensors(state.student)
