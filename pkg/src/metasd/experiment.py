"""Desk-scale ablation runs: the full method against plain mutual distillation
with a frozen random mask of the same sparsity, over several seeds."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .graph import Dataset, load_dataset
from .training import TrainConfig, train

DESK_CONFIG = dict(backbone="ComplEx", dim=64, gamma=0.9, epochs=100, batch_size=512,
                   quiz_size=200, n3_weight=0.02, eval_every=10)

VARIANTS = {
    "metasd": dict(meta_enabled=True, mask_mode="dynamic"),
    "wo-meta": dict(meta_enabled=False, mask_mode="dynamic"),
    "wo-prune": dict(meta_enabled=True, mask_mode="random_frozen"),
    "wo-prune-meta": dict(meta_enabled=False, mask_mode="random_frozen"),
}


@dataclass
class RunResult:
    variant: str
    seed: int
    teacher_mrr: float
    student_mrr: float
    student_ce: List[float]
    teacher_ce: List[float]
    seconds: float


@dataclass
class AblationResult:
    runs: List[RunResult] = field(default_factory=list)

    def by_variant(self, variant: str) -> List[RunResult]:
        return [r for r in self.runs if r.variant == variant]

    def median(self, variant: str, what: str = "student_mrr") -> float:
        return statistics.median(getattr(r, what) for r in self.by_variant(variant))


def window_means(values: Sequence[float], window: int) -> List[float]:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    n = len(values) // window
    return [float(np.mean(values[i * window:(i + 1) * window])) for i in range(n)]


def is_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def run_variant(data: Dataset, variant: str, seed: int, **overrides) -> RunResult:
    cfg = TrainConfig(**{**DESK_CONFIG, **VARIANTS[variant], "seed": seed, **overrides})
    splits = data.splits(cfg.quiz_size, cfg.seed, cfg.quiz_overlap)
    started = time.time()
    state = train(splits, cfg)
    final = state.history[-1]["valid"]
    return RunResult(variant, seed, final["teacher"]["mrr"], final["student"]["mrr"],
                     [r["student"]["ce"] for r in state.history],
                     [r["teacher"]["ce"] for r in state.history], time.time() - started)


def run_ablation(data: Optional[Dataset] = None, variants=("metasd", "wo-prune-meta"),
                 seeds=range(5), progress=None, **overrides) -> AblationResult:
    """Train every variant under every seed on ``data`` (default: the bundled toy KG)."""
    data = data if data is not None else load_dataset("toy150")
    result = AblationResult()
    for seed in seeds:
        for variant in variants:
            run = run_variant(data, variant, seed, **overrides)
            result.runs.append(run)
            if progress is not None:
                progress(run)
    return result
